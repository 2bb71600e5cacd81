import logging
import struct
import numpy
import simplejson as json

from .errors import ConfigurationError
from .net_engine import Batch
from .utils import atomic_write, content_hash, dumps_json

__all__ = [
	'DatasetSpec',
	'MultiTaskDataset',
	'gen_overlap_glyph',
	'gen_related_regression',
	'gen_random_quadratic',
	'generate',
	'load_dataset',
	'glyph_alphabet',
	'relatedness_gram',
	'SPLITS',
]

SPLITS = ('train', 'valid', 'test')

# Magic bytes at the start of a .mtds container
MAGIC = b'MTDS1\n'

# Segments lit for each glyph class, seven-segment style: top, upper right, lower right, bottom, lower left, upper left, middle
GLYPH_SEGMENTS = ['abcdef', 'bc', 'abged', 'abgcd', 'fgbc', 'afgcd', 'afgedc', 'abc', 'abcdefg', 'abcdfg']


class DatasetSpec:
	"""Kind, split sizes, seed and kind specific options of a synthetic dataset"""

	# Default options of each kind, other option names are rejected
	DEFAULT_OPTIONS = {
		'overlap-glyph': {
			'overlap': 0.0,
			'raster_height': 20,
			'raster_width': 20,
			'glyph_height': 14,
			'glyph_width': 10,
			'stroke': 2,
			'noise': 0.1,
		},
		'related-regression': {'num_tasks': 2, 'rho': 0.0, 'input_dim': 8, 'noise': 0.1, 'weight_norm': 1.0},
		'random-quadratic': {'num_tasks': 2, 'dimension': 2, 'kappa': 1.0, 'spread': 1.0, 'noise': 0.0, 'centers': None},
	}

	def __init__(self, kind, sizes=None, seed=0, **options):
		if kind not in self.DEFAULT_OPTIONS:
			raise ConfigurationError('Unknown dataset kind "%s", must be one of %s' % (kind, ', '.join(self.DEFAULT_OPTIONS)))

		self.kind = kind
		self.seed = int(seed)

		sizes = dict(sizes or {'train': 1000, 'valid': 200, 'test': 200})
		unknown = set(sizes) - set(SPLITS)
		if unknown:
			raise ConfigurationError('Unknown dataset splits: %s' % ', '.join(sorted(unknown)))
		self.sizes = {split: int(sizes.get(split, 0)) for split in SPLITS}
		if any(size < 0 for size in self.sizes.values()) or self.sizes['train'] < 1:
			raise ConfigurationError('Split sizes must be non-negative and train must have at least one example')

		unknown = set(options) - set(self.DEFAULT_OPTIONS[kind])
		if unknown:
			raise ConfigurationError('Unknown options for dataset kind %s: %s' % (kind, ', '.join(sorted(unknown))))
		self.options = dict(self.DEFAULT_OPTIONS[kind])
		self.options.update(options)

	@property
	def total_size(self):
		return sum(self.sizes.values())

	def get_option(self, name):
		return self.options[name]

	def to_dict(self):
		data = {'kind': self.kind, 'sizes': self.sizes, 'seed': self.seed}
		data.update(self.options)
		return data

	@classmethod
	def from_dict(cls, data):
		data = dict(data)
		try:
			kind = data.pop('kind')
		except KeyError as error:
			raise ConfigurationError('Dataset spec is missing the "kind" field') from error
		try:
			return cls(kind, **data)
		except TypeError as error:
			raise ConfigurationError('Invalid dataset spec: %s' % error) from error


class MultiTaskDataset:
	"""Immutable splits of inputs (float32) and per-task labels (uint16 classes or float32 values)"""

	def __init__(self, spec, splits, task_kinds, attributes=None):
		self.spec = spec
		self.splits = splits
		self.task_kinds = list(task_kinds)
		self.attributes = attributes or {}

		for split, (inputs, labels) in splits.items():
			inputs.setflags(write=False)
			if len(labels) != self.num_tasks:
				raise ConfigurationError('Split %s has labels for %s tasks, expected %s' % (split, len(labels), self.num_tasks))
			for label in labels:
				label.setflags(write=False)
				if len(label) != len(inputs):
					raise ConfigurationError('Split %s has %s inputs but %s labels' % (split, len(inputs), len(label)))

	@property
	def num_tasks(self):
		return len(self.task_kinds)

	@property
	def input_dim(self):
		return self.splits['train'][0].shape[1]

	def num_examples(self, split='train'):
		return len(self.splits[split][0])

	def steps_per_epoch(self, batch_size):
		return -(-self.num_examples('train') // batch_size)

	def get_split(self, split):
		inputs, labels = self.splits[split]
		return inputs.astype(numpy.float64), list(labels)

	def iter_batches(self, split='train', batch_size=32, rng=None):
		"""Yield the batches of a split, shuffled by rng if given, the last batch may be smaller"""

		inputs, labels = self.splits[split]
		count = len(inputs)
		order = numpy.arange(count) if rng is None else rng.permutation(count)

		for batch_id, start in enumerate(range(0, count, batch_size)):
			indices = order[start:start + batch_size]
			yield Batch(inputs[indices].astype(numpy.float64), [label[indices] for label in labels], batch_id)

	def get_header(self, config_hash=None):
		return {
			'spec': self.spec.to_dict(),
			'task_kinds': self.task_kinds,
			'attributes': self.attributes,
			'splits': {split: len(self.splits[split][0]) for split in SPLITS},
			'input_dim': self.input_dim,
			'label_dtypes': [label.dtype.str for label in self.splits['train'][1]],
			'label_shapes': [list(label.shape[1:]) for label in self.splits['train'][1]],
			'config_hash': config_hash or content_hash(self.spec.to_dict()),
		}

	def save(self, file_path, config_hash=None):
		"""Write the dataset as a .mtds container: magic, header length, JSON header, then the little-endian arrays"""

		header = dumps_json(self.get_header(config_hash)).encode('utf-8')

		with atomic_write(file_path, 'wb') as file:
			file.write(MAGIC)
			file.write(struct.pack('<I', len(header)))
			file.write(header)
			for split in SPLITS:
				inputs, labels = self.splits[split]
				file.write(numpy.ascontiguousarray(inputs, dtype='<f4').tobytes())
				for label in labels:
					file.write(numpy.ascontiguousarray(label, dtype=label.dtype.newbyteorder('<')).tobytes())

		logging.info('Wrote dataset %s (%s) to "%s"', self.spec.kind, self.spec.sizes, file_path)


def load_dataset(file_path):
	"""Read a .mtds container"""

	try:
		with open(file_path, 'rb') as file:
			content = file.read()
	except OSError as error:
		raise ConfigurationError('Could not read dataset file "%s": %s' % (file_path, error)) from error

	if not content.startswith(MAGIC):
		raise ConfigurationError('File "%s" is not a .mtds dataset' % file_path)

	try:
		offset = len(MAGIC)
		(header_length,) = struct.unpack_from('<I', content, offset)
		offset += 4
		header = json.loads(content[offset:offset + header_length].decode('utf-8'))
		offset += header_length

		splits = {}
		for split in SPLITS:
			count = header['splits'][split]
			inputs = numpy.frombuffer(content, dtype='<f4', count=count * header['input_dim'], offset=offset)
			offset += inputs.nbytes
			labels = []
			for dtype, shape in zip(header['label_dtypes'], header['label_shapes']):
				size = count * int(numpy.prod(shape, dtype=numpy.int64))
				label = numpy.frombuffer(content, dtype=dtype, count=size, offset=offset)
				offset += label.nbytes
				labels.append(label.reshape([count] + shape).copy())
			splits[split] = (inputs.reshape(count, header['input_dim']).copy(), labels)
	except (struct.error, UnicodeDecodeError, ValueError, KeyError, TypeError) as error:
		raise ConfigurationError('Dataset file "%s" is truncated or corrupt: %s' % (file_path, error)) from error

	if offset != len(content):
		raise ConfigurationError('Dataset file "%s" has %s trailing bytes' % (file_path, len(content) - offset))

	return MultiTaskDataset(DatasetSpec.from_dict(header['spec']), splits, header['task_kinds'], header['attributes'])


def split_arrays(spec, inputs, labels):
	"""Slice arrays holding all the examples into disjoint train, valid and test splits"""
	splits = {}
	start = 0
	for split in SPLITS:
		stop = start + spec.sizes[split]
		splits[split] = (inputs[start:stop], [label[start:stop] for label in labels])
		start = stop
	return splits


def glyph_alphabet(height, width, stroke):
	"""Return the 10 glyph bitmaps, seven-segment shapes drawn with the given stroke"""

	if height < 3 * stroke or width < 2 * stroke + 1:
		raise ConfigurationError('Glyph of %sx%s is too small for a stroke of %s' % (height, width, stroke))

	middle = height // 2 - stroke // 2
	segments = {
		'a': (slice(0, stroke), slice(0, width)),
		'b': (slice(0, height // 2 + 1), slice(width - stroke, width)),
		'c': (slice(height // 2, height), slice(width - stroke, width)),
		'd': (slice(height - stroke, height), slice(0, width)),
		'e': (slice(height // 2, height), slice(0, stroke)),
		'f': (slice(0, height // 2 + 1), slice(0, stroke)),
		'g': (slice(middle, middle + stroke), slice(0, width)),
	}

	glyphs = numpy.zeros((len(GLYPH_SEGMENTS), height, width), dtype=numpy.float32)
	for glyph, lit in enumerate(GLYPH_SEGMENTS):
		for segment in lit:
			glyphs[glyph][segments[segment]] = 1.0
	return glyphs


def gen_overlap_glyph(spec):
	"""Two classification tasks: the classes of a left and a right glyph superimposed with some horizontal overlap"""

	overlap = float(spec.get_option('overlap'))
	if not 0 <= overlap <= 0.9:
		raise ConfigurationError('overlap must be in [0, 0.9], got %s' % overlap)

	raster_height, raster_width = int(spec.get_option('raster_height')), int(spec.get_option('raster_width'))
	glyph_height, glyph_width = int(spec.get_option('glyph_height')), int(spec.get_option('glyph_width'))
	offset = int(round((1.0 - overlap) * glyph_width))

	if offset + glyph_width > raster_width or glyph_height > raster_height:
		raise ConfigurationError(
			'Raster of %sx%s is too small for two %sx%s glyphs at offset %s'
			% (raster_height, raster_width, glyph_height, glyph_width, offset)
		)

	glyphs = glyph_alphabet(glyph_height, glyph_width, int(spec.get_option('stroke')))
	rng = numpy.random.default_rng(spec.seed)
	count = spec.total_size

	left = rng.integers(0, len(glyphs), size=count)
	right = rng.integers(0, len(glyphs), size=count)
	left_shift = rng.integers(0, raster_height - glyph_height + 1, size=count)
	right_shift = rng.integers(0, raster_height - glyph_height + 1, size=count)

	images = numpy.zeros((count, raster_height, raster_width), dtype=numpy.float32)
	for example in range(count):
		rows = slice(left_shift[example], left_shift[example] + glyph_height)
		images[example, rows, 0:glyph_width] = glyphs[left[example]]
		rows = slice(right_shift[example], right_shift[example] + glyph_height)
		region = images[example, rows, offset:offset + glyph_width]
		images[example, rows, offset:offset + glyph_width] = numpy.maximum(region, glyphs[right[example]])

	images += (spec.get_option('noise') * rng.standard_normal(images.shape)).astype(numpy.float32)

	inputs = images.reshape(count, -1)
	labels = [left.astype('<u2'), right.astype('<u2')]
	attributes = {'num_classes': [len(glyphs), len(glyphs)], 'raster': [raster_height, raster_width], 'offset': offset}

	return MultiTaskDataset(spec, split_arrays(spec, inputs, labels), ['classification', 'classification'], attributes)


def relatedness_gram(num_tasks, rho):
	"""Return the task Gram matrix with unit diagonal and rho elsewhere, rejecting rho it cannot hold

	rho may also be a full num_tasks x num_tasks correlation matrix for mixed relatedness.
	"""

	if numpy.ndim(rho) == 0:
		rho = float(rho)
		if not -1 <= rho <= 1:
			raise ConfigurationError('rho must be in [-1, 1], got %s' % rho)
		gram = numpy.full((num_tasks, num_tasks), rho)
		numpy.fill_diagonal(gram, 1.0)
		if numpy.linalg.eigvalsh(gram).min() < -1e-10:
			raise ConfigurationError(
				'rho=%s is infeasible for %s tasks: pairwise correlations need rho >= %s'
				% (rho, num_tasks, -1.0 / (num_tasks - 1))
			)
		return gram

	gram = numpy.array(rho, dtype=numpy.float64)
	if gram.shape != (num_tasks, num_tasks):
		raise ConfigurationError('rho matrix must have shape (%s, %s), got %s' % (num_tasks, num_tasks, gram.shape))
	if not numpy.array_equal(gram, gram.T) or numpy.any(numpy.diag(gram) != 1.0) or numpy.any(numpy.abs(gram) > 1):
		raise ConfigurationError('rho matrix must be symmetric with unit diagonal and entries in [-1, 1]')
	if numpy.linalg.eigvalsh(gram).min() < -1e-10:
		raise ConfigurationError('rho matrix is infeasible: it is not positive semi-definite')
	return gram


def gram_square_root(gram):
	"""Symmetric square root of a positive semi-definite matrix"""
	# Fully correlated tasks get bit-identical columns
	if numpy.all(gram == 1.0):
		return numpy.ones_like(gram) / numpy.sqrt(len(gram))
	eigenvalues, eigenvectors = numpy.linalg.eigh(gram)
	return (eigenvectors * numpy.sqrt(numpy.clip(eigenvalues, 0.0, None))) @ eigenvectors.T


def gen_related_regression(spec):
	"""Linear regression tasks whose weight vectors (and noises) have pairwise correlation rho"""

	num_tasks = int(spec.get_option('num_tasks'))
	input_dim = int(spec.get_option('input_dim'))
	rho = spec.get_option('rho')

	if num_tasks < 1:
		raise ConfigurationError('num_tasks must be positive')
	if input_dim < num_tasks:
		raise ConfigurationError('input_dim (%s) must be at least num_tasks (%s)' % (input_dim, num_tasks))

	root = gram_square_root(relatedness_gram(num_tasks, rho))

	rng = numpy.random.default_rng(spec.seed)
	basis, triangular = numpy.linalg.qr(rng.standard_normal((input_dim, num_tasks)))
	weights = spec.get_option('weight_norm') * (basis @ root)

	count = spec.total_size
	inputs = rng.standard_normal((count, input_dim)).astype(numpy.float32)
	noise = spec.get_option('noise') * (rng.standard_normal((count, num_tasks)) @ root)
	targets = (inputs.astype(numpy.float64) @ weights + noise).astype('<f4')

	labels = [targets[:, task:task + 1].copy() for task in range(num_tasks)]
	attributes = {'task_weights': weights.T.tolist(), 'rho': rho}

	return MultiTaskDataset(spec, split_arrays(spec, inputs, labels), ['regression'] * num_tasks, attributes)


def gen_random_quadratic(spec):
	"""Quadratic wells over a shared vector; task 0 has condition number kappa, the others are isotropic

	The per-example labels of task i are the well centre plus optional noise; the
	curvature matrices are kept in the dataset attributes.
	"""

	num_tasks = int(spec.get_option('num_tasks'))
	dimension = int(spec.get_option('dimension'))
	kappa = float(spec.get_option('kappa'))

	if num_tasks < 1 or dimension < 1:
		raise ConfigurationError('num_tasks and dimension must be positive')
	if not kappa >= 1:
		raise ConfigurationError('kappa must be at least 1, got %s' % kappa)

	rng = numpy.random.default_rng(spec.seed)

	rotation, triangular = numpy.linalg.qr(rng.standard_normal((dimension, dimension)))
	curvature = (rotation * numpy.geomspace(1.0, kappa, dimension)) @ rotation.T
	curvatures = [(curvature + curvature.T) / 2.0] + [numpy.eye(dimension) for task in range(1, num_tasks)]

	centers = spec.get_option('centers')
	if centers is None:
		centers = spec.get_option('spread') * rng.standard_normal((num_tasks, dimension))
	centers = numpy.asarray(centers, dtype=numpy.float64)
	if centers.shape != (num_tasks, dimension):
		raise ConfigurationError('centers must have shape (%s, %s), got %s' % (num_tasks, dimension, centers.shape))

	count = spec.total_size
	labels = [
		(centers[task] + spec.get_option('noise') * rng.standard_normal((count, dimension))).astype('<f4')
		for task in range(num_tasks)
	]
	inputs = numpy.zeros((count, 0), dtype=numpy.float32)
	attributes = {'curvatures': [matrix.tolist() for matrix in curvatures], 'centers': centers.tolist(), 'kappa': kappa}

	return MultiTaskDataset(spec, split_arrays(spec, inputs, labels), ['quadratic'] * num_tasks, attributes)


GENERATORS = {
	'overlap-glyph': gen_overlap_glyph,
	'related-regression': gen_related_regression,
	'random-quadratic': gen_random_quadratic,
}


def generate(spec):
	"""Generate the dataset described by a DatasetSpec"""
	logging.info('Generating %s dataset with seed %s', spec.kind, spec.seed)
	return GENERATORS[spec.kind](spec)
