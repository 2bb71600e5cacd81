import logging
from collections import defaultdict
import numpy
from astropy.table import Table

from .errors import ConfigurationError, DegenerateLossError
from .utils import write_table, read_table, write_json, table_config_hash

__all__ = [
	'TransferenceRecord',
	'TransferenceMatrix',
	'NormalizedMatrix',
	'check_baseline',
	'lookahead_losses',
	'transference_exact',
	'transference_first_order',
	'transference_second_order',
	'candidate_transference',
	'total_transference',
	'log_product_alignment',
	'aggregate',
	'normalize',
	'EPS_LOSS',
	'EPS_SELF',
]

# Baseline losses at or below this are degenerate denominators
EPS_LOSS = 1e-12

# Self-transference at or below this makes a column unusable for normalization
EPS_SELF = 1e-9

# Name of the first column of a matrix CSV
SOURCE_COLUMN = 'source\\target'


class TransferenceRecord:
	"""Transference of one source (task index or candidate id) onto one target task at one step"""

	__slots__ = ('step', 'source', 'target', 'value')

	def __init__(self, step, source, target, value):
		self.step = step
		self.source = source
		self.target = target
		self.value = value

	def __repr__(self):
		return 'TransferenceRecord(step=%s, source=%r, target=%s, value=%r)' % (self.step, self.source, self.target, self.value)


class TransferenceMatrix:
	"""Square matrix of transference scores, row = source task, column = target task; never symmetrized"""

	def __init__(self, values, step_count=0, task_names=None):
		self.values = numpy.array(values, dtype=numpy.float64)
		if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
			raise ConfigurationError('A transference matrix must be square, got shape %s' % (self.values.shape,))
		self.step_count = step_count
		self.config_hash = None
		if task_names is None:
			task_names = ['task_%s' % task for task in range(self.num_tasks)]
		self.task_names = list(task_names)

	@property
	def num_tasks(self):
		return self.values.shape[0]

	def scaled(self, factor):
		return TransferenceMatrix(self.values * factor, self.step_count, self.task_names)

	def to_table(self):
		table = Table()
		table[SOURCE_COLUMN] = self.task_names
		for task, name in enumerate(self.task_names):
			table[name] = self.values[:, task]
		return table

	def write_csv(self, file_path, config_hash=None, metadata=None):
		"""Write the matrix as CSV, and the metadata (seed, learning rate, steps...) in a JSON sidecar"""
		write_table(self.to_table(), file_path, config_hash)
		sidecar = dict(metadata or {})
		sidecar.update({'step_count': self.step_count, 'task_names': self.task_names, 'config_hash': config_hash})
		write_json(file_path + '.json', sidecar)

	@classmethod
	def read_csv(cls, file_path):
		table = read_table(file_path)
		if table.colnames[0] != SOURCE_COLUMN:
			raise ConfigurationError('File "%s" is not a transference matrix: first column is "%s"' % (file_path, table.colnames[0]))
		task_names = table.colnames[1:]
		if [str(name) for name in table[SOURCE_COLUMN]] != task_names:
			raise ConfigurationError('File "%s" rows and columns do not name the same tasks' % file_path)
		values = numpy.array([numpy.asarray(table[name], dtype=numpy.float64) for name in task_names]).T
		matrix = cls(values, task_names=task_names)
		matrix.config_hash = table_config_hash(table)
		return matrix


class NormalizedMatrix:
	"""Matrix of 1 - t(b,a) / t(a,a) with a validity flag per target column"""

	def __init__(self, values, valid, task_names=None):
		self.values = numpy.array(values, dtype=numpy.float64)
		self.valid = numpy.array(valid, dtype=bool)
		if task_names is None:
			task_names = ['task_%s' % task for task in range(len(self.valid))]
		self.task_names = list(task_names)

	@property
	def num_tasks(self):
		return len(self.valid)

	def invalid_tasks(self):
		return [int(task) for task in numpy.flatnonzero(~self.valid)]


def check_baseline(losses, eps=EPS_LOSS):
	"""Raise a DegenerateLossError if some baseline loss is not above eps"""
	for task, loss in enumerate(losses):
		if not loss > eps:
			raise DegenerateLossError(task, float(loss), eps)


def lookahead_losses(model, params, batch, optimizer, candidate_gradient, updated_task_params=None):
	"""Return the per-task losses after the simulated shared update with candidate_gradient"""
	if updated_task_params is None:
		updated_task_params = params.task_specific
	lookahead = params.with_shared(optimizer.simulate_update(params.shared, candidate_gradient), updated_task_params)
	return model.forward_losses(lookahead, batch)


def transference_exact(model, params, batch, optimizer, candidate_gradient, updated_task_params=None, baseline=None):
	"""Return the vector Z_j = 1 - L_j(lookahead) / L_j(current) for every target task j

	The lookahead uses the simulated shared update and updated_task_params (the current
	task parameters when omitted); the denominator always uses the current parameters.
	"""
	if baseline is None:
		baseline = model.forward_losses(params, batch)
	check_baseline(baseline)
	return 1.0 - lookahead_losses(model, params, batch, optimizer, candidate_gradient, updated_task_params) / baseline


def transference_first_order(gradients, losses, sources=None):
	"""Return the matrix of <grad L_j, g_i> / L_j, row i = source, column j = target, learning rate omitted

	The sources default to the task gradients themselves.
	"""
	check_baseline(losses)
	targets = numpy.stack(gradients)
	sources = targets if sources is None else numpy.stack(sources)
	return (sources @ targets.T) / numpy.asarray(losses)[None, :]


def transference_second_order(gradients, losses, hessian_vector_product, sources=None, learning_rate=1.0):
	"""Return the matrix of (eta <grad L_j, g_i> - eta^2 / 2 g_i^T H_j g_i) / L_j

	hessian_vector_product(j, v) must return H_j v. With the default learning rate of 1
	the values are learning-rate free, like transference_first_order.
	"""
	check_baseline(losses)
	targets = numpy.stack(gradients)
	sources = targets if sources is None else numpy.stack(sources)
	linear = sources @ targets.T

	curvature = numpy.zeros_like(linear)
	for target in range(targets.shape[0]):
		for source, direction in enumerate(sources):
			if numpy.any(direction):
				curvature[source, target] = direction @ hessian_vector_product(target, direction)

	return (learning_rate * linear - 0.5 * learning_rate ** 2 * curvature) / numpy.asarray(losses)[None, :]


def candidate_transference(model, params, batch, optimizer, candidate_gradients, updated_task_params=None, baseline=None):
	"""Return the matrix of exact transference, row = candidate, column = target task, on a shared baseline"""
	if baseline is None:
		baseline = model.forward_losses(params, batch)
	check_baseline(baseline)
	return numpy.array(
		[
			transference_exact(model, params, batch, optimizer, gradient, updated_task_params, baseline)
			for gradient in candidate_gradients
		]
	)


def total_transference(
	model, params, batch, optimizer, candidates, gradients, updated_task_params=None, baseline=None, rng=0
):
	"""Return the total transference (sum over targets) of each candidate, produced from the task shared gradients

	rng seeds the PCGrad task order, the same seed gives the same totals.
	"""
	candidate_gradients = [candidate.produce(gradients, rng) for candidate in candidates]
	matrix = candidate_transference(model, params, batch, optimizer, candidate_gradients, updated_task_params, baseline)
	return matrix.sum(axis=1)


def log_product_alignment(gradients, losses, candidate_gradient):
	"""Return <sum_j grad L_j / L_j, g>, the inner product of the gradient of log prod_j L_j with the candidate"""
	check_baseline(losses)
	normalized = numpy.sum(numpy.stack(gradients) / numpy.asarray(losses)[:, None], axis=0)
	return float(normalized @ candidate_gradient)


def aggregate(records, steps_per_epoch, num_tasks=None, task_names=None):
	"""Average per-step records into per-epoch matrices and the run matrix

	Records are keyed by integer source and target tasks; steps must be contiguous.
	Return (list of epoch TransferenceMatrix, run TransferenceMatrix).
	"""
	if steps_per_epoch < 1:
		raise ConfigurationError('steps_per_epoch must be positive')

	sums = defaultdict(float)
	counts = defaultdict(int)
	epoch_sums = defaultdict(float)
	epoch_counts = defaultdict(int)
	steps = set()
	largest_task = -1

	for record in records:
		steps.add(record.step)
		largest_task = max(largest_task, record.source, record.target)
		key = (record.source, record.target)
		sums[key] += record.value
		counts[key] += 1
		epoch_key = (record.step // steps_per_epoch, record.source, record.target)
		epoch_sums[epoch_key] += record.value
		epoch_counts[epoch_key] += 1

	if not steps:
		raise ValueError('Cannot aggregate an empty stream of transference records')

	first_step, last_step = min(steps), max(steps)
	if len(steps) != last_step - first_step + 1:
		raise ValueError('Transference records do not cover contiguous steps from %s to %s' % (first_step, last_step))

	if num_tasks is None:
		num_tasks = largest_task + 1

	def mean_matrix(sum_of, count_of, prefix=()):
		values = numpy.full((num_tasks, num_tasks), numpy.nan)
		for source in range(num_tasks):
			for target in range(num_tasks):
				key = prefix + (source, target)
				if count_of.get(key, 0):
					values[source, target] = sum_of[key] / count_of[key]
		return values

	first_epoch, last_epoch = first_step // steps_per_epoch, last_step // steps_per_epoch
	epoch_matrices = []
	for epoch in range(first_epoch, last_epoch + 1):
		epoch_steps = [step for step in steps if step // steps_per_epoch == epoch]
		epoch_matrices.append(TransferenceMatrix(mean_matrix(epoch_sums, epoch_counts, (epoch,)), len(epoch_steps), task_names))

	logging.debug('Aggregated %s steps into %s epochs', len(steps), len(epoch_matrices))

	return epoch_matrices, TransferenceMatrix(mean_matrix(sums, counts), len(steps), task_names)


def normalize(matrix, eps=EPS_SELF):
	"""Return the normalized matrix 1 - t(b,a) / t(a,a), flagging columns whose self-transference is not above eps"""

	diagonal = numpy.diag(matrix.values)
	valid = diagonal > eps
	values = numpy.full_like(matrix.values, numpy.nan)
	values[:, valid] = 1.0 - matrix.values[:, valid] / diagonal[valid]
	# Exactly zero on the diagonal
	for task in numpy.flatnonzero(valid):
		values[task, task] = 0.0

	if not numpy.all(valid):
		logging.warning(
			'Self-transference of tasks %s is not above %s, their columns are invalid',
			[matrix.task_names[task] for task in numpy.flatnonzero(~valid)],
			eps,
		)

	return NormalizedMatrix(values, valid, matrix.task_names)
