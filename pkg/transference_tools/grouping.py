import logging
import itertools
from pprint import pformat
import numpy
from astropy.table import Table

from .errors import ConfigurationError, SolverMismatchError
from .utils import write_json, atomic_write

__all__ = [
	'GroupingPlan',
	'group_cost',
	'candidate_groups',
	'cost_matrix',
	'build_plan',
	'solve_exhaustive',
	'solve_branch_and_bound',
	'solve_both',
	'SOLVERS',
	'MAX_EXHAUSTIVE_TASKS',
]

# Above this the 2^m - 1 candidate groups make enumeration hopeless
MAX_EXHAUSTIVE_TASKS = 12

# Number of collections evaluated at once by the exhaustive solver
CHUNK_SIZE = 4096

# Objectives of both solvers must agree within this
OBJECTIVE_TOLERANCE = 1e-9


class GroupingPlan:
	"""A collection of task groups and the group each task is served from"""

	def __init__(self, groups, serving, objective, budget, task_names=None, solver=None, statistics=None):
		self.groups = [tuple(group) for group in groups]
		self.serving = dict(serving)
		self.objective = float(objective)
		self.budget = budget
		if task_names is None:
			task_names = ['task_%s' % task for task in range(len(self.serving))]
		self.task_names = list(task_names)
		self.solver = solver
		self.statistics = statistics or {}

	@property
	def num_tasks(self):
		return len(self.serving)

	def served_tasks(self, group_index):
		return [task for task, index in sorted(self.serving.items()) if index == group_index]

	def to_dict(self):
		return {
			'groups': [list(group) for group in self.groups],
			'serving': {str(task): index for task, index in self.serving.items()},
			'objective': self.objective,
			'budget': self.budget,
			'task_names': self.task_names,
			'solver': self.solver,
			'statistics': self.statistics,
		}

	@classmethod
	def from_dict(cls, data):
		serving = {int(task): index for task, index in data['serving'].items()}
		return cls(data['groups'], serving, data['objective'], data['budget'], data.get('task_names'), data.get('solver'), data.get('statistics'))

	def to_table(self):
		"""Return one row per group, a column per task marked S when served from the group and x when only trained in it"""

		table = Table()
		table['group'] = numpy.arange(len(self.groups))
		for task, name in enumerate(self.task_names):
			marks = []
			for index, group in enumerate(self.groups):
				if self.serving[task] == index:
					marks.append('S')
				elif task in group:
					marks.append('x')
				else:
					marks.append('-')
			table[name] = marks
		return table

	def format_table(self):
		lines = self.to_table().pformat(max_lines=-1, max_width=-1)
		lines.append('objective: %.6g (budget %s, %s groups)' % (self.objective, self.budget, len(self.groups)))
		return '\n'.join(lines)

	def write(self, file_path, config_hash=None):
		"""Write the plan as a JSON document, and its text table next to it"""
		data = self.to_dict()
		data['config_hash'] = config_hash
		write_json(file_path, data)
		with atomic_write(file_path.rsplit('.', 1)[0] + '.txt') as file:
			file.write(self.format_table() + '\n')

	def __repr__(self):
		return 'GroupingPlan(groups=%s, objective=%r)' % (self.groups, self.objective)


def check_columns(normalized, tasks):
	for task in tasks:
		if not normalized.valid[task]:
			raise ConfigurationError('Self-transference of task %s (%s) is degenerate, its column cannot be used for grouping' % (task, normalized.task_names[task]))


def group_cost(group, normalized):
	"""Return the cost of serving every member a of the group: the mean of the normalized transference onto a from the other members"""

	group = sorted(set(group))
	if not group:
		raise ConfigurationError('A task group cannot be empty')
	check_columns(normalized, group)

	costs = {}
	for task in group:
		others = [source for source in group if source != task]
		# The mean over no other members is 0, like the normalized self-transference
		costs[task] = float(numpy.mean(normalized.values[others, task])) if others else 0.0
	return costs


def candidate_groups(num_tasks):
	"""All the non empty task groups, smaller groups first then in lexicographic order"""
	tasks = range(num_tasks)
	return [group for size in range(1, num_tasks + 1) for group in itertools.combinations(tasks, size)]


def cost_matrix(groups, normalized):
	"""Return the groups x tasks matrix of serving costs, inf where the task is not in the group"""
	costs = numpy.full((len(groups), normalized.num_tasks), numpy.inf)
	for index, group in enumerate(groups):
		for task, cost in group_cost(group, normalized).items():
			costs[index, task] = cost
	return costs


def serving_key(group, cost):
	# Cheapest group, then the smaller one, then the lexicographically first
	return (cost, len(group), group)


def build_plan(groups, normalized, budget, solver=None, statistics=None):
	"""Serve each task from its cheapest group of the collection and drop the groups that serve no task"""

	groups = sorted({tuple(sorted(group)) for group in groups}, key=lambda group: (len(group), group))
	costs = [group_cost(group, normalized) for group in groups]

	chosen = {}
	for task in range(normalized.num_tasks):
		options = [(serving_key(group, cost[task]), index) for index, (group, cost) in enumerate(zip(groups, costs)) if task in cost]
		if not options:
			raise ConfigurationError('Task %s is not covered by any group' % task)
		chosen[task] = min(options)[1]

	kept = sorted(set(chosen.values()))
	serving = {task: kept.index(index) for task, index in chosen.items()}
	objective = sum(costs[index][task] for task, index in sorted(chosen.items()))

	return GroupingPlan([groups[index] for index in kept], serving, objective, budget, normalized.task_names, solver, statistics)


def check_problem(normalized, budget):
	if budget < 1:
		raise ConfigurationError('The grouping budget must be at least 1, got %s' % budget)
	check_columns(normalized, range(normalized.num_tasks))


def singleton_shortcut(normalized, budget, solver):
	"""Return the singleton plan when it is optimal: enough budget and no negative normalized transference"""
	if budget < normalized.num_tasks:
		return None
	if numpy.any(normalized.values < 0):
		return None
	logging.debug('Budget covers all %s tasks and no cost is negative, serving every task alone', normalized.num_tasks)
	return build_plan([(task,) for task in range(normalized.num_tasks)], normalized, budget, solver, {'shortcut': True})


def solve_exhaustive(normalized, budget):
	"""Return the optimal plan by evaluating every collection of at most budget groups

	Collections are enumerated by increasing size, and only a strictly better collection
	replaces the best one found, so the first optimum found is kept.
	"""

	check_problem(normalized, budget)
	num_tasks = normalized.num_tasks
	if num_tasks > MAX_EXHAUSTIVE_TASKS:
		raise ConfigurationError('Exhaustive grouping supports at most %s tasks, got %s' % (MAX_EXHAUSTIVE_TASKS, num_tasks))

	plan = singleton_shortcut(normalized, budget, 'exhaustive')
	if plan is not None:
		return plan

	groups = candidate_groups(num_tasks)
	costs = cost_matrix(groups, normalized)

	if num_tasks > 7:
		logging.warning('Exhaustive grouping of %s tasks evaluates a very large number of collections', num_tasks)

	best_objective = numpy.inf
	best_collection = None
	evaluated = 0

	# A collection keeps at most one serving group per task
	for size in range(1, min(budget, num_tasks) + 1):
		collections = itertools.combinations(range(len(groups)), size)
		while True:
			chunk = numpy.array(list(itertools.islice(collections, CHUNK_SIZE)), dtype=numpy.intp)
			if not len(chunk):
				break
			evaluated += len(chunk)
			# chunk x size x tasks, then the cheapest serving cost of every task
			objectives = costs[chunk].min(axis=1).sum(axis=1)
			index = int(numpy.argmin(objectives))
			if objectives[index] < best_objective:
				best_objective = objectives[index]
				best_collection = chunk[index]

	plan = build_plan([groups[index] for index in best_collection], normalized, budget, 'exhaustive', {'evaluated': evaluated})
	logging.debug('Exhaustive grouping evaluated %s collections: %s', evaluated, plan)
	return plan


class BranchAndBound:
	"""Depth first search over the serving group of each task, in task order

	A node commits groups for the first tasks; its bound adds to the committed costs the
	cheapest cost every remaining task could get (only from the committed groups once the
	budget is used up). Nodes whose bound is not below the incumbent are pruned.
	"""

	def __init__(self, normalized, budget):
		self.normalized = normalized
		self.num_tasks = normalized.num_tasks
		self.budget = min(budget, self.num_tasks)
		self.groups = candidate_groups(self.num_tasks)
		self.costs = cost_matrix(self.groups, normalized)
		best_costs = self.costs.min(axis=0)
		# Cheapest possible cost of the tasks from each index on
		self.best_remaining = numpy.append(numpy.cumsum(best_costs[::-1])[::-1], 0.0)
		# Groups containing each task, cheapest first
		self.options = [
			sorted(numpy.flatnonzero(numpy.isfinite(self.costs[:, task])), key=lambda index, task=task: (self.costs[index, task], index))
			for task in range(self.num_tasks)
		]
		self.prunes = 0
		self.nodes = 0
		self.incumbent = numpy.inf
		self.incumbent_groups = None

	def bound(self, committed, cost, task):
		if len(committed) < self.budget:
			return cost + self.best_remaining[task]
		# No new group can be opened, the remaining tasks are served from the committed ones
		return cost + self.costs[sorted(committed), task:].min(axis=0).sum()

	def branch(self, committed, cost, task):
		self.nodes += 1

		if task == self.num_tasks:
			if cost < self.incumbent:
				self.incumbent = cost
				self.incumbent_groups = sorted(committed)
			return

		if self.bound(committed, cost, task) >= self.incumbent:
			self.prunes += 1
			return

		committed_options = [index for index in self.options[task] if index in committed]
		new_options = [index for index in self.options[task] if index not in committed] if len(committed) < self.budget else []

		for index in committed_options:
			self.branch(committed, cost + self.costs[index, task], task + 1)

		for index in new_options:
			committed.add(index)
			self.branch(committed, cost + self.costs[index, task], task + 1)
			committed.discard(index)

	def run(self):
		# Serving everything from the group of all tasks is always feasible
		everything = len(self.groups) - 1
		self.incumbent = float(self.costs[everything].sum())
		self.incumbent_groups = [everything]

		self.branch(set(), 0.0, 0)
		return [self.groups[index] for index in self.incumbent_groups]


def solve_branch_and_bound(normalized, budget):
	"""Return the optimal plan by branch and bound, with the same optimum as solve_exhaustive"""

	check_problem(normalized, budget)

	plan = singleton_shortcut(normalized, budget, 'branch-and-bound')
	if plan is not None:
		return plan

	search = BranchAndBound(normalized, budget)
	groups = search.run()
	plan = build_plan(groups, normalized, budget, 'branch-and-bound', {'nodes': search.nodes, 'prunes': search.prunes})
	logging.debug('Branch and bound visited %s nodes, pruned %s: %s', search.nodes, search.prunes, plan)
	return plan


def solve_both(normalized, budget):
	"""Solve with both solvers and return the exhaustive plan, raising SolverMismatchError if the objectives differ"""

	exhaustive = solve_exhaustive(normalized, budget)
	branch_and_bound = solve_branch_and_bound(normalized, budget)

	if abs(exhaustive.objective - branch_and_bound.objective) > OBJECTIVE_TOLERANCE:
		raise SolverMismatchError(
			'Grouping solvers disagree: exhaustive %r, branch and bound %r\n%s'
			% (exhaustive.objective, branch_and_bound.objective, pformat([exhaustive.to_dict(), branch_and_bound.to_dict()]))
		)

	exhaustive.solver = 'both'
	exhaustive.statistics.update(branch_and_bound.statistics)
	return exhaustive


SOLVERS = {
	'exhaustive': solve_exhaustive,
	'branch-and-bound': solve_branch_and_bound,
	'both': solve_both,
}
