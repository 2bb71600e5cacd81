__all__ = ['ConfigurationError', 'NumericError', 'DegenerateLossError', 'SolverMismatchError', 'TriggerError']


class ConfigurationError(ValueError):
	"""Raised when shapes, specs or configuration fields are invalid"""

	def __init__(self, message, line=None):
		self.line = line
		if line is not None:
			message = 'line %s: %s' % (line, message)
		super().__init__(message)


class NumericError(ArithmeticError):
	"""Raised when a computation produces non-finite values"""

	def __init__(self, message, layer=None):
		self.layer = layer
		if layer is not None:
			message = '%s (layer %s)' % (message, layer)
		super().__init__(message)


class DegenerateLossError(NumericError):
	"""Raised when a baseline loss is too close to zero to divide by"""

	def __init__(self, task, loss, eps):
		self.task = task
		self.loss = loss
		super().__init__('Baseline loss of task %s is %r, not above %r' % (task, loss, eps))


class SolverMismatchError(RuntimeError):
	"""Raised when the grouping solvers disagree on the optimal objective"""


class TriggerError(RuntimeError):
	"""Raised when a replay never reaches its trigger condition"""

	def __init__(self, message, summary=None):
		self.summary = summary or {}
		super().__init__(message)
