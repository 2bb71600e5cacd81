import logging
import numpy
from astropy.table import Table

from .errors import ConfigurationError, NumericError
from .utils import write_table, write_json

__all__ = ['LandscapeGrid', 'probe_1d', 'probe_2d']


class LandscapeGrid:
	"""Per-task loss samples over a 1-D or 2-D grid of shared parameter values"""

	def __init__(self, coordinates, losses, totals, directions, metadata=None):
		# coordinates: list of 1 or 2 arrays of axis values, losses: grid shape + (num_tasks,)
		self.coordinates = [numpy.asarray(axis, dtype=numpy.float64) for axis in coordinates]
		self.losses = numpy.asarray(losses, dtype=numpy.float64)
		self.totals = numpy.asarray(totals, dtype=numpy.float64)
		self.directions = [numpy.asarray(direction, dtype=numpy.float64) for direction in directions]
		self.metadata = metadata or {}

	@property
	def dimensions(self):
		return len(self.coordinates)

	@property
	def num_tasks(self):
		return self.losses.shape[-1]

	def losses_at(self, *coordinate):
		"""Return the per-task losses at the grid point with the given coordinates"""
		index = tuple(int(numpy.flatnonzero(axis == value)[0]) for axis, value in zip(self.coordinates, coordinate))
		return self.losses[index]

	def argmin(self, surface=None):
		"""Return the coordinates of the smallest value of a task surface (or of the totals when surface is None)"""
		values = self.totals if surface is None else self.losses[..., surface]
		index = numpy.unravel_index(int(numpy.argmin(values)), values.shape)
		return tuple(float(axis[position]) for axis, position in zip(self.coordinates, index))

	def to_table(self, task_names=None):
		"""Return one row per sample: the coordinates, the per-task losses and the total"""

		if task_names is None:
			task_names = ['task_%s' % task for task in range(self.num_tasks)]

		table = Table()
		if self.dimensions == 1:
			table['alpha'] = self.coordinates[0]
			losses = self.losses
			totals = self.totals
		else:
			u, v = numpy.meshgrid(self.coordinates[0], self.coordinates[1], indexing='ij')
			table['u'] = u.ravel()
			table['v'] = v.ravel()
			losses = self.losses.reshape(-1, self.num_tasks)
			totals = self.totals.ravel()

		for task, name in enumerate(task_names):
			table[name] = losses[:, task]
		table['total'] = totals
		return table

	def write(self, file_path, task_names=None, config_hash=None):
		"""Write the grid CSV and a JSON sidecar with the metadata and the argmin locations"""
		write_table(self.to_table(task_names), file_path, config_hash)
		sidecar = dict(self.metadata)
		sidecar['config_hash'] = config_hash
		sidecar['argmin'] = {
			'total': self.argmin(),
			'tasks': [self.argmin(task) for task in range(self.num_tasks)],
		}
		write_json(file_path + '.json', sidecar)


def evaluate_losses(model, params, batch, shared):
	losses = model.forward_losses(params.with_shared(shared), batch)
	if not numpy.all(numpy.isfinite(losses)):
		raise NumericError('Non-finite loss while probing the landscape')
	return losses


def probe_1d(model, params, batch, optimizer, candidate_gradient, samples=31, extent=3.0, task_params=None):
	"""Sample the losses along the line from the current shared parameters through their simulated update

	The line is parameterized by alpha, 0 being the current parameters and 1 the update
	the optimizer would apply; alpha = 1 is always among the samples.
	"""

	if samples < 2:
		raise ConfigurationError('A 1-D probe needs at least 2 samples')

	shared = params.shared
	updated = optimizer.simulate_update(shared, candidate_gradient)
	if task_params is not None:
		params = params.with_shared(shared, task_params)

	alphas = numpy.linspace(0.0, extent, samples)
	if extent >= 1.0:
		alphas = numpy.union1d(alphas, [1.0])

	# (1 - alpha) x + alpha y is exactly x at 0 and exactly y at 1
	losses = numpy.array([evaluate_losses(model, params, batch, (1.0 - alpha) * shared + alpha * updated) for alpha in alphas])

	metadata = {
		'kind': '1d',
		'extent': extent,
		'samples': len(alphas),
		'update_alpha': 1.0,
		'learning_rate': optimizer.learning_rate,
		'batch_id': batch.batch_id,
	}
	return LandscapeGrid([alphas], losses, losses.sum(axis=1), [updated - shared], metadata)


def probe_2d(model, params, batch, rng, grid=21, radius=0.1):
	"""Sample the losses on a grid spanned by two random directions scaled to the norm of the shared parameters

	Coordinates range over [-radius, radius] in units of that norm. The combined surface is
	the mean of the task losses.
	"""

	if grid < 3:
		raise ConfigurationError('A 2-D probe needs a grid of at least 3x3')

	shared = params.shared
	norm = numpy.linalg.norm(shared)
	if norm == 0:
		raise ConfigurationError('Cannot scale random directions to a zero parameter norm')

	rng = numpy.random.default_rng(rng)
	directions = []
	for index in range(2):
		direction = rng.standard_normal(shared.shape)
		directions.append(direction * (norm / numpy.linalg.norm(direction)))

	coordinates = radius * numpy.linspace(-1.0, 1.0, grid)
	if grid % 2:
		coordinates[grid // 2] = 0.0

	losses = numpy.zeros((grid, grid, model.num_tasks))
	for row, u in enumerate(coordinates):
		for column, v in enumerate(coordinates):
			losses[row, column] = evaluate_losses(model, params, batch, shared + u * directions[0] + v * directions[1])

	metadata = {'kind': '2d', 'grid': grid, 'radius': radius, 'parameter_norm': norm, 'batch_id': batch.batch_id}
	logging.debug('Probed a %sx%s landscape around parameters of norm %s', grid, grid, norm)
	return LandscapeGrid([coordinates, coordinates], losses, losses.mean(axis=2), directions, metadata)
