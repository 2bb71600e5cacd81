import logging
from collections import Counter
from pprint import pformat
import numpy

from .errors import ConfigurationError
from .utils import spawn_seeds
from .mechanisms import CombinedCandidate
from .optimizers import SHARED
from .transference import (
	TransferenceRecord,
	aggregate,
	candidate_transference,
	check_baseline,
	log_product_alignment,
	transference_second_order,
)

__all__ = ['StepLog', 'RunArtifacts', 'Trainer', 'train_step', 'train', 'MODES']

# plain: apply the first candidate, measure: apply combined and record transference,
# exact / first-order / second-order: IT-MTL selection by total transference, its log-product
# alignment or its second order expansion
MODES = ('plain', 'measure', 'exact', 'first-order', 'second-order')

# Modes that select the shared update by the argmax of their scores
SELECTION_MODES = ('exact', 'first-order', 'second-order')


class StepLog:
	"""Selection record of one training step"""

	def __init__(self, step, epoch, candidate_ids, totals, chosen, baseline_losses, mode, learning_rate):
		self.step = step
		self.epoch = epoch
		self.candidate_ids = list(candidate_ids)
		self.totals = numpy.asarray(totals, dtype=numpy.float64)
		self.chosen = chosen
		self.baseline_losses = numpy.asarray(baseline_losses, dtype=numpy.float64)
		self.mode = mode
		self.learning_rate = learning_rate

	@property
	def chosen_id(self):
		return self.candidate_ids[self.chosen]

	def to_rows(self):
		"""Return (step, candidate_id, total_transference, chosen) rows, one per candidate"""
		return [
			(self.step, candidate_id, float(total), int(index == self.chosen))
			for index, (candidate_id, total) in enumerate(zip(self.candidate_ids, self.totals))
		]


class RunArtifacts:
	"""Everything a training run produces"""

	def __init__(self, params, step_logs, epoch_metrics, records, steps_per_epoch, num_tasks):
		self.params = params
		self.step_logs = step_logs
		self.epoch_metrics = epoch_metrics
		self.records = records
		self.steps_per_epoch = steps_per_epoch
		self.num_tasks = num_tasks

	def epoch_losses(self):
		"""Return the per-epoch mean of the per-task training losses"""
		return numpy.array([metrics['train_loss'] for metrics in self.epoch_metrics])

	def choice_histogram(self):
		return Counter(log.chosen_id for log in self.step_logs)

	def transference(self, task_names=None):
		"""Return (epoch matrices, run matrix) aggregated from the recorded transference, or None"""
		if not self.records:
			return None
		return aggregate(self.records, self.steps_per_epoch, self.num_tasks, task_names)


class Trainer:
	"""Train a multi-task model, selecting the shared update among gradient candidates at every step"""

	def __init__(self, model, optimizer, candidates, mode='exact', record_transference=None, candidate_rng=0, data_rng=0):
		if mode not in MODES:
			raise ConfigurationError('Unknown training mode "%s", must be one of %s' % (mode, ', '.join(MODES)))
		if mode == 'measure':
			candidates = [CombinedCandidate()]
		if not candidates:
			raise ConfigurationError('At least one gradient candidate is required')

		self.model = model
		self.optimizer = optimizer
		self.candidates = list(candidates)
		self.mode = mode
		self.record_transference = mode == 'measure' if record_transference is None else record_transference
		self.candidate_rng = numpy.random.default_rng(candidate_rng)
		self.data_rng = numpy.random.default_rng(data_rng)

		self.step_logs = []
		self.records = []
		self.epoch_metrics = []

	@property
	def candidate_ids(self):
		return [candidate.id for candidate in self.candidates]

	def get_scores(self, params, batch, baseline, shared_gradients, candidate_gradients):
		"""Return the selection score of every candidate, the head parameters are already updated"""

		if self.mode == 'exact':
			matrix = candidate_transference(
				self.model, params, batch, self.optimizer, candidate_gradients, params.task_specific, baseline
			)
			return matrix.sum(axis=1)
		elif self.mode == 'first-order':
			return numpy.array([log_product_alignment(shared_gradients, baseline, gradient) for gradient in candidate_gradients])
		elif self.mode == 'second-order':
			matrix = transference_second_order(
				shared_gradients,
				baseline,
				lambda task, vector: self.model.hessian_vector_product(params, batch, task, vector),
				sources=candidate_gradients,
				learning_rate=self.optimizer.learning_rate,
			)
			return matrix.sum(axis=1)

		return numpy.full(len(candidate_gradients), numpy.nan)

	def select(self, scores):
		"""Index of the best candidate, ties go to the lowest index"""
		if self.mode in SELECTION_MODES:
			return int(numpy.argmax(scores))
		return 0

	def record(self, params, batch, baseline, shared_gradients, step):
		"""Record the transference of every single task gradient onto every task"""
		matrix = candidate_transference(
			self.model, params, batch, self.optimizer, shared_gradients, params.task_specific, baseline
		)
		for source, row in enumerate(matrix):
			for target, value in enumerate(row):
				self.records.append(TransferenceRecord(step, source, target, float(value)))

	def train_step(self, params, batch, step=0, epoch=0):
		"""Run one step of the selection algorithm, in place on params; on failure params and optimizer are restored"""

		baseline, gradients = self.model.losses_and_gradients(params, batch)
		if self.mode != 'plain' or self.record_transference:
			check_baseline(baseline)

		shared_gradients = [shared_gradient for shared_gradient, task_gradient in gradients]

		snapshot = params.copy()
		optimizer_state = self.optimizer.state()
		record_count = len(self.records)

		try:
			# Task-specific parameters always take their plain gradient step first
			for task, (shared_gradient, task_gradient) in enumerate(gradients):
				self.optimizer.apply_update(params, task, task_gradient)

			candidate_gradients = [candidate.produce(shared_gradients, self.candidate_rng) for candidate in self.candidates]
			scores = self.get_scores(params, batch, baseline, shared_gradients, candidate_gradients)
			chosen = self.select(scores)

			if self.record_transference:
				self.record(params, batch, baseline, shared_gradients, step)

			self.optimizer.apply_update(params, SHARED, candidate_gradients[chosen])

		except BaseException:
			params.assign(snapshot)
			self.optimizer.restore(optimizer_state)
			del self.records[record_count:]
			raise

		log = StepLog(step, epoch, self.candidate_ids, scores, chosen, baseline, self.mode, self.optimizer.learning_rate)
		self.step_logs.append(log)
		logging.debug('Step %s: scores %s, chose %s', step, pformat(dict(zip(log.candidate_ids, log.totals))), log.chosen_id)
		return log

	def replay(self, params, dataset, epochs, batch_size):
		"""Yield (step, epoch, batch) before each step is applied to params, the step runs when the iteration resumes"""

		step = 0
		for epoch in range(epochs):
			if epoch and self.optimizer.halve_every and epoch % self.optimizer.halve_every == 0:
				self.optimizer.halve_learning_rate()

			for batch in dataset.iter_batches('train', batch_size, self.data_rng):
				yield step, epoch, batch
				self.train_step(params, batch, step, epoch)
				step += 1

			self.end_epoch(params, dataset, epoch)

	def end_epoch(self, params, dataset, epoch):
		"""Summarize the epoch: mean training losses, validation losses and accuracies, candidate choices"""

		logs = [log for log in self.step_logs if log.epoch == epoch]
		metrics = {
			'epoch': epoch,
			'learning_rate': self.optimizer.learning_rate,
			'train_loss': numpy.mean([log.baseline_losses for log in logs], axis=0),
			'choices': dict(Counter(log.chosen_id for log in logs)),
		}

		if dataset.num_examples('valid'):
			metrics['valid_loss'], metrics['valid_accuracy'] = self.model.evaluate(params, *dataset.get_split('valid'))

		self.epoch_metrics.append(metrics)
		logging.info(
			'Epoch %s: train loss %s, choices %s', epoch, numpy.array2string(metrics['train_loss'], precision=5), metrics['choices']
		)

	def train(self, params, dataset, epochs, batch_size):
		"""Train params in place for a number of epochs, return the RunArtifacts"""

		if batch_size < 1:
			raise ConfigurationError('batch_size must be positive')
		if dataset.num_tasks != self.model.num_tasks:
			raise ConfigurationError('Dataset has %s tasks, model has %s' % (dataset.num_tasks, self.model.num_tasks))

		for step, epoch, batch in self.replay(params, dataset, epochs, batch_size):
			pass

		return RunArtifacts(
			params, self.step_logs, self.epoch_metrics, self.records, dataset.steps_per_epoch(batch_size), self.model.num_tasks
		)


def train_step(model, params, batch, optimizer, candidates, mode='exact', rng=0, step=0):
	"""Run one selection step in place on params and return its StepLog"""
	return Trainer(model, optimizer, candidates, mode, record_transference=False, candidate_rng=rng).train_step(params, batch, step)


def train(model, params, dataset, optimizer, candidates, epochs, mode='exact', batch_size=32, seed=0, record_transference=None):
	"""Train params in place, candidate and data orders seeded from seed, and return the RunArtifacts"""
	init_seed, candidate_seed, data_seed = spawn_seeds(seed)
	trainer = Trainer(model, optimizer, candidates, mode, record_transference, candidate_seed, data_seed)
	return trainer.train(params, dataset, epochs, batch_size)
