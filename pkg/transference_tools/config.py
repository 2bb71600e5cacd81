import os
import logging
from pprint import pformat
import yaml

from .errors import ConfigurationError
from .utils import content_hash, atomic_write
from .datasets import DatasetSpec, generate, load_dataset
from .net_engine import ModelSpec, build_model
from .optimizers import Optimizer
from .mechanisms import parse_candidates, CombinedCandidate

__all__ = ['RunConfig', 'load_yaml', 'load_dataset_spec', 'get_output_root', 'OUTPUT_ROOT_VARIABLE', 'MODE_ALIASES']

# Environment variable holding the directory relative output directories are resolved against
OUTPUT_ROOT_VARIABLE = 'TRANSFERENCE_OUTPUT_ROOT'

# Config names of the training modes
MODE_ALIASES = {
	'plain': 'plain',
	'measure': 'measure',
	'it-mtl-exact': 'exact',
	'it-mtl-first-order': 'first-order',
	'it-mtl-second-order': 'second-order',
	'exact': 'exact',
	'first-order': 'first-order',
	'second-order': 'second-order',
}

# Loss used for each kind of dataset task when the model section does not list them
DEFAULT_LOSSES = {'classification': 'cross_entropy', 'regression': 'mse', 'quadratic': 'quadratic'}

SECTIONS = ('dataset', 'model', 'optimizer', 'training', 'output')

TRAINING_FIELDS = {'mode', 'candidates', 'epochs', 'batch_size', 'seed', 'record_transference'}


def get_output_root():
	return os.environ.get(OUTPUT_ROOT_VARIABLE, '.')


def key_lines(node, path=()):
	"""Return the 1-based line of every mapping key of a composed YAML node, by key path"""
	lines = {}
	if isinstance(node, yaml.MappingNode):
		for key, value in node.value:
			key_path = path + (key.value,)
			lines[key_path] = key.start_mark.line + 1
			lines.update(key_lines(value, key_path))
	return lines


def load_yaml(text, source='<string>'):
	"""Parse a YAML document, return (data, key lines)"""
	try:
		node = yaml.compose(text, Loader=yaml.SafeLoader)
		data = yaml.safe_load(text)
	except yaml.YAMLError as error:
		mark = getattr(error, 'problem_mark', None)
		raise ConfigurationError('Invalid YAML in %s: %s' % (source, error), mark.line + 1 if mark else None) from error

	if data is None:
		data = {}
	if not isinstance(data, dict):
		raise ConfigurationError('%s must contain a mapping' % source, 1)

	return data, key_lines(node)


def read_text(file_path):
	try:
		with open(file_path, 'r') as file:
			return file.read()
	except OSError as error:
		raise ConfigurationError('Could not read file "%s": %s' % (file_path, error)) from error


def load_dataset_spec(file_path):
	"""Read a DatasetSpec from a YAML file, either bare or under a dataset section"""

	data, lines = load_yaml(read_text(file_path), file_path)
	prefix = ()
	if 'dataset' in data:
		data = data['dataset']
		prefix = ('dataset',)

	try:
		return DatasetSpec.from_dict(data)
	except ConfigurationError as error:
		raise ConfigurationError(str(error), lines.get(prefix + ('kind',)) or lines.get(prefix)) from error


class RunConfig:
	"""A run configuration document with sections dataset, model, optimizer, training and output

	The document is fully validated on construction; field errors carry the YAML line of the
	offending key when the document came from YAML text.
	"""

	def __init__(self, data, lines=None, source='<config>', base_directory='.'):
		self.data = data
		self.lines = lines or {}
		self.source = source
		self.base_directory = base_directory
		self.validate()

	@classmethod
	def from_text(cls, text, source='<string>', base_directory='.'):
		data, lines = load_yaml(text, source)
		return cls(data, lines, source, base_directory)

	@classmethod
	def load(cls, file_path):
		return cls.from_text(read_text(file_path), file_path, os.path.dirname(os.path.abspath(file_path)))

	def get_line(self, *path):
		"""Return the line of the longest prefix of path found in the document"""
		while path:
			if path in self.lines:
				return self.lines[path]
			path = path[:-1]
		return None

	def error(self, message, *path):
		path = tuple(name for name in path if name is not None)
		return ConfigurationError('%s: %s' % ('.'.join(path), message) if path else message, self.get_line(*path))

	def section(self, name):
		section = self.data.get(name, {})
		if section is None:
			return {}
		if not isinstance(section, dict):
			raise self.error('section must be a mapping', name)
		return section

	def validate(self):
		"""Check every section, raising a ConfigurationError pointing at the offending key"""

		unknown = set(self.data) - set(SECTIONS)
		if unknown:
			name = sorted(unknown)[0]
			raise self.error('unknown section, must be one of %s' % ', '.join(SECTIONS), name)

		dataset = self.section('dataset')
		if 'path' in dataset:
			if len(dataset) != 1:
				raise self.error('a dataset path cannot be combined with generation options', 'dataset')
		else:
			try:
				DatasetSpec.from_dict(dataset)
			except ConfigurationError as error:
				raise self.error(str(error), 'dataset', 'kind') from error

		try:
			self.optimizer_spec = self.build_optimizer()
		except ConfigurationError as error:
			raise self.error(str(error), 'optimizer', self.first_key('optimizer')) from error
		if not self.optimizer_spec.learning_rate > 0:
			raise self.error('must be positive', 'optimizer', 'learning_rate')

		training = self.section('training')
		unknown = set(training) - TRAINING_FIELDS
		if unknown:
			name = sorted(unknown)[0]
			raise self.error('unknown field, must be one of %s' % ', '.join(sorted(TRAINING_FIELDS)), 'training', name)

		mode = training.get('mode', 'it-mtl-exact')
		if mode not in MODE_ALIASES:
			raise self.error('unknown mode "%s", must be one of %s' % (mode, ', '.join(MODE_ALIASES)), 'training', 'mode')
		self.mode = MODE_ALIASES[mode]

		if 'seed' not in training:
			raise self.error('a seed is required for reproducible runs', 'training')
		self.seed = self.get_int('training', 'seed', minimum=0)
		self.epochs = self.get_int('training', 'epochs', 1, minimum=0)
		self.batch_size = self.get_int('training', 'batch_size', 32, minimum=1)

		record = training.get('record_transference', None)
		if record is not None and not isinstance(record, bool):
			raise self.error('must be true or false', 'training', 'record_transference')
		self.record_transference = record

		candidate_ids = training.get('candidates', ['combined'])
		if not isinstance(candidate_ids, list) or not candidate_ids:
			raise self.error('must be a non empty list of candidate ids', 'training', 'candidates')
		self.candidate_ids = [str(candidate_id) for candidate_id in candidate_ids]
		if self.mode == 'plain' and len(self.candidate_ids) != 1:
			raise self.error('plain mode applies exactly one candidate, got %s' % len(self.candidate_ids), 'training', 'candidates')
		if self.mode == 'measure' and self.candidate_ids != ['combined']:
			logging.warning('Measure mode always applies the combined gradient, ignoring candidates %s', self.candidate_ids)

		output = self.section('output')
		unknown = set(output) - {'directory'}
		if unknown:
			raise self.error('unknown field', 'output', sorted(unknown)[0])

		model = self.section('model')
		if 'curvatures' in model:
			raise self.error('curvatures come from the dataset attributes', 'model', 'curvatures')

	def first_key(self, section):
		keys = list(self.section(section))
		return keys[0] if keys else None

	def get_int(self, section, name, default=None, minimum=None):
		value = self.section(section).get(name, default)
		if isinstance(value, bool) or not isinstance(value, int):
			raise self.error('must be an integer, got %r' % (value,), section, name)
		if minimum is not None and value < minimum:
			raise self.error('must be at least %s, got %s' % (minimum, value), section, name)
		return value

	@property
	def config_hash(self):
		return content_hash(self.data)

	def get_output_directory(self):
		"""Return the run directory, relative paths are resolved against the output root"""
		directory = self.section('output').get('directory', None)
		if directory is None:
			directory = 'run-%s' % self.config_hash[:12]
		return os.path.join(get_output_root(), str(directory))

	def build_dataset(self):
		"""Load the dataset file, or generate the dataset from its spec"""
		dataset = self.section('dataset')
		if 'path' in dataset:
			file_path = os.path.join(self.base_directory, str(dataset['path']))
			try:
				return load_dataset(file_path)
			except ConfigurationError as error:
				raise self.error(str(error), 'dataset', 'path') from error
		try:
			return generate(DatasetSpec.from_dict(dataset))
		except ConfigurationError as error:
			raise self.error(str(error), 'dataset') from error

	def build_model_spec(self, dataset):
		"""Return the ModelSpec of the model section, filling the fields implied by the dataset"""

		model = dict(self.section('model'))
		kind = model.setdefault('kind', 'quadratic' if 'curvatures' in dataset.attributes else 'dense')

		if kind == 'quadratic':
			if 'curvatures' not in dataset.attributes:
				raise self.error('a quadratic model needs a random-quadratic dataset', 'model', 'kind')
			model['curvatures'] = dataset.attributes['curvatures']
			model.setdefault('input_dim', len(dataset.attributes['curvatures'][0]))
		else:
			model.setdefault('input_dim', dataset.input_dim)

		if 'losses' not in model:
			model['losses'] = [DEFAULT_LOSSES[task_kind] for task_kind in dataset.task_kinds]

		try:
			spec = ModelSpec.from_dict(model)
		except ConfigurationError as error:
			raise self.error(str(error), 'model', self.first_key('model')) from error

		if spec.num_tasks != dataset.num_tasks:
			raise self.error('model has %s losses, dataset has %s tasks' % (spec.num_tasks, dataset.num_tasks), 'model', 'losses')
		return spec

	def build_model(self, dataset):
		return build_model(self.build_model_spec(dataset))

	def build_optimizer(self):
		return Optimizer.from_dict(self.section('optimizer'))

	def build_candidates(self, num_tasks):
		if self.mode == 'measure':
			return [CombinedCandidate()]
		try:
			return parse_candidates(self.candidate_ids, num_tasks)
		except ConfigurationError as error:
			raise self.error(str(error), 'training', 'candidates') from error

	def to_yaml(self):
		return yaml.safe_dump(self.data, default_flow_style=False, sort_keys=True)

	def save(self, file_path):
		"""Write the configuration, a run is reproducible from this copy alone"""
		with atomic_write(file_path) as file:
			file.write('# config_hash: %s\n' % self.config_hash)
			file.write(self.to_yaml())

	def __repr__(self):
		return 'RunConfig(%s)' % pformat(self.data)
