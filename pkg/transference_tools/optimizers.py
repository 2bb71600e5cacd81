import logging
import numpy

from .errors import ConfigurationError, NumericError

__all__ = ['Optimizer', 'SHARED']

# Target name of the shared parameters, tasks are targeted by their index
SHARED = 'shared'


class Optimizer:
	"""SGD with optional momentum, able to simulate an update without changing any state

	The momentum rule is v <- mu * v + g followed by x <- x - eta * v, so the first step
	from a zero velocity is exactly the SGD step.
	"""

	KINDS = ('sgd', 'momentum')

	def __init__(self, kind='sgd', learning_rate=0.01, momentum=0.0, halve_every=0):
		if kind not in self.KINDS:
			raise ConfigurationError('Unknown optimizer kind "%s", must be one of %s' % (kind, ', '.join(self.KINDS)))
		if not learning_rate >= 0:
			raise ConfigurationError('learning_rate must be non-negative, got %s' % learning_rate)
		if not 0 <= momentum < 1:
			raise ConfigurationError('momentum must be in [0, 1), got %s' % momentum)
		if kind == 'sgd' and momentum != 0:
			raise ConfigurationError('momentum must be 0 for the sgd optimizer')

		self.kind = kind
		self.learning_rate = float(learning_rate)
		self.momentum = float(momentum)
		self.halve_every = int(halve_every)
		# Velocity buffers by target, missing buffers are zero
		self.velocity = {}

	def get_velocity(self, target, like):
		velocity = self.velocity.get(target, None)
		if velocity is None:
			return numpy.zeros_like(like)
		return velocity

	def step(self, position, velocity, gradient):
		"""Return the (position, velocity) after one update, without modifying the inputs"""
		if self.kind == 'momentum':
			velocity = self.momentum * velocity + gradient
			return position - self.learning_rate * velocity, velocity
		return position - self.learning_rate * gradient, velocity

	def check_gradient(self, position, gradient):
		gradient = numpy.asarray(gradient, dtype=numpy.float64)
		if gradient.shape != position.shape:
			raise ConfigurationError('Gradient has shape %s, parameters %s' % (gradient.shape, position.shape))
		if not numpy.all(numpy.isfinite(gradient)):
			raise NumericError('Non-finite gradient')
		return gradient

	def simulate_update(self, shared, gradient, target=SHARED):
		"""Return the parameters apply_update would produce for target, without mutating any state"""
		shared = numpy.asarray(shared, dtype=numpy.float64)
		gradient = self.check_gradient(shared, gradient)
		position, velocity = self.step(shared, self.get_velocity(target, shared), gradient)
		return position

	def apply_update(self, params, target, gradient):
		"""Update the shared parameters (target SHARED) or the parameters of task target in place"""

		position = params.shared if target == SHARED else params.task_specific[target]
		gradient = self.check_gradient(position, gradient)
		new_position, velocity = self.step(position, self.get_velocity(target, position), gradient)

		if not numpy.all(numpy.isfinite(new_position)):
			raise NumericError('Update of %s parameters produced non-finite values' % target)

		position[...] = new_position
		if self.kind == 'momentum':
			self.velocity[target] = velocity

	def halve_learning_rate(self):
		self.learning_rate /= 2.0
		logging.info('Learning rate halved to %s', self.learning_rate)

	def state(self):
		"""Return a copy of the mutable state, for restore"""
		return self.learning_rate, {target: velocity.copy() for target, velocity in self.velocity.items()}

	def restore(self, state):
		learning_rate, velocity = state
		self.learning_rate = learning_rate
		self.velocity = {target: buffer.copy() for target, buffer in velocity.items()}

	def equals(self, other):
		"""Bitwise equality of the optimizer states"""
		return (
			self.kind == other.kind
			and self.learning_rate == other.learning_rate
			and self.momentum == other.momentum
			and self.velocity.keys() == other.velocity.keys()
			and all(numpy.array_equal(self.velocity[target], other.velocity[target]) for target in self.velocity)
		)

	def to_dict(self):
		return {
			'kind': self.kind,
			'learning_rate': self.learning_rate,
			'momentum': self.momentum,
			'halve_every': self.halve_every,
		}

	@classmethod
	def from_dict(cls, data):
		unknown = set(data) - {'kind', 'learning_rate', 'momentum', 'halve_every'}
		if unknown:
			raise ConfigurationError('Unknown optimizer fields: %s' % ', '.join(sorted(unknown)))
		try:
			return cls(**data)
		except TypeError as error:
			raise ConfigurationError('Invalid optimizer spec: %s' % error) from error
