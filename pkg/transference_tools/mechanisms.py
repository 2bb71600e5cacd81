import numpy

from .errors import ConfigurationError

__all__ = [
	'GradientCandidate',
	'CombinedCandidate',
	'SubsetCandidate',
	'PCGradCandidate',
	'combined',
	'subset',
	'pcgrad',
	'parse_candidate',
	'parse_candidates',
	'single_task_candidates',
]


def combined(gradients):
	"""Sum of all the per-task shared gradients"""
	return numpy.sum(numpy.stack(gradients), axis=0)


def subset(gradients, tasks):
	"""Sum of the shared gradients of a subset of tasks"""
	tasks = sorted(set(tasks))
	if not tasks:
		raise ConfigurationError('A task subset cannot be empty')
	if tasks[0] < 0 or tasks[-1] >= len(gradients):
		raise ConfigurationError('Task subset %s out of range for %s tasks' % (tasks, len(gradients)))
	return numpy.sum(numpy.stack([gradients[task] for task in tasks]), axis=0)


def pcgrad(gradients, rng):
	"""Project conflicting gradients: each task gradient is projected onto the normal plane of the task gradients it conflicts with"""

	if rng is None:
		raise ConfigurationError('PCGrad needs a seed or a numpy Generator for its task order')
	rng = numpy.random.default_rng(rng)
	num_tasks = len(gradients)
	if num_tasks < 1:
		raise ConfigurationError('PCGrad needs at least one gradient')

	projected = [numpy.array(gradient, dtype=numpy.float64) for gradient in gradients]

	for task in rng.permutation(num_tasks):
		gradient = projected[task]
		for other in rng.permutation(num_tasks):
			if other == task:
				continue
			reference = gradients[other]
			squared_norm = numpy.dot(reference, reference)
			# Projection on a zero vector is undefined
			if squared_norm == 0:
				continue
			inner = numpy.dot(gradient, reference)
			if inner < 0:
				gradient = gradient - (inner / squared_norm) * reference
		projected[task] = gradient

	return combined(projected)


class GradientCandidate:
	"""A named mechanism producing a shared gradient from the per-task shared gradients"""

	def __init__(self, candidate_id):
		self.id = candidate_id

	def produce(self, gradients, rng=None):
		raise NotImplementedError()

	def __repr__(self):
		return '<%s %s>' % (self.__class__.__name__, self.id)


class CombinedCandidate(GradientCandidate):
	def __init__(self):
		super().__init__('combined')

	def produce(self, gradients, rng=None):
		return combined(gradients)


class SubsetCandidate(GradientCandidate):
	def __init__(self, tasks):
		self.tasks = tuple(sorted(set(tasks)))
		super().__init__('subset:' + ','.join(str(task) for task in self.tasks))

	def produce(self, gradients, rng=None):
		return subset(gradients, self.tasks)


class PCGradCandidate(GradientCandidate):
	def __init__(self):
		super().__init__('pcgrad')

	def produce(self, gradients, rng=None):
		return pcgrad(gradients, rng)


def parse_candidate(candidate_id, num_tasks):
	"""Return the candidate for a stable id: combined, pcgrad or subset:i,j,..."""

	candidate_id = str(candidate_id).strip()
	if candidate_id == 'combined':
		return CombinedCandidate()
	elif candidate_id == 'pcgrad':
		return PCGradCandidate()
	elif candidate_id.startswith('subset:'):
		try:
			tasks = [int(task) for task in candidate_id[len('subset:'):].strip('{}').split(',') if task.strip()]
		except ValueError as error:
			raise ConfigurationError('Invalid task indices in candidate "%s"' % candidate_id) from error
		if not tasks:
			raise ConfigurationError('Candidate "%s" has an empty task subset' % candidate_id)
		if min(tasks) < 0 or max(tasks) >= num_tasks:
			raise ConfigurationError('Candidate "%s" refers to tasks outside of [0, %s)' % (candidate_id, num_tasks))
		return SubsetCandidate(tasks)

	raise ConfigurationError('Unknown gradient candidate "%s", must be combined, pcgrad or subset:i,j,...' % candidate_id)


def parse_candidates(candidate_ids, num_tasks):
	"""Return the list of candidates for a list of ids, rejecting duplicates"""

	candidates = [parse_candidate(candidate_id, num_tasks) for candidate_id in candidate_ids]
	if not candidates:
		raise ConfigurationError('At least one gradient candidate is required')

	ids = [candidate.id for candidate in candidates]
	duplicates = sorted({candidate_id for candidate_id in ids if ids.count(candidate_id) > 1})
	if duplicates:
		raise ConfigurationError('Duplicate gradient candidates: %s' % ', '.join(duplicates))

	return candidates


def single_task_candidates(num_tasks):
	return [SubsetCandidate([task]) for task in range(num_tasks)]
