#!/usr/bin/env python3
import copy
import logging
from unittest import TestCase, main
import numpy

from transference_tools import (
	DatasetSpec,
	GradientCandidate,
	ModelSpec,
	Optimizer,
	Trainer,
	build_model,
	candidate_transference,
	generate,
	parse_candidates,
	train,
	train_step,
)
from tests.toys import quadratic_toy, tanh_network, random_batch, random_quadratic


def regression_dataset(seed=0, num_tasks=2, input_dim=4):
	spec = DatasetSpec('related-regression', sizes={'train': 24, 'valid': 8, 'test': 0}, seed=seed, num_tasks=num_tasks, input_dim=input_dim, rho=0.3)
	return generate(spec)


class FailingCandidate(GradientCandidate):
	'''A candidate that fails while producing its gradient'''

	def __init__(self):
		super().__init__('failing')

	def produce(self, gradients, rng=None):
		raise RuntimeError('candidate failure')


class TestTrainStep(TestCase):
	'''Test the Trainer.train_step method'''

	def test_quadratic_toy(self):
		'''On the quadratic toy, the single task steps hurt the other task and combined wins'''

		model, params, batch = quadratic_toy(0.5)
		candidates = parse_candidates(['subset:0', 'subset:1', 'combined'], 2)
		log = train_step(model, params, batch, Optimizer('sgd', 0.1), candidates)

		msg = 'The total transferences must be -0.08, -0.08 and 0'
		numpy.testing.assert_allclose(log.totals, [-0.08, -0.08, 0.0], rtol=0, atol=1e-12, err_msg=msg)

		msg = 'The combined candidate must be chosen'
		self.assertEqual(log.chosen_id, 'combined', msg=msg)

		msg = 'The combined gradient of the toy is zero so theta must stay at 0.5'
		self.assertEqual(params.shared[0], 0.5, msg=msg)

	def test_argmax(self):
		'''The applied candidate is the argmax of a recomputation from snapshots'''

		model, params = tanh_network(seed=11, num_tasks=3)
		candidates = parse_candidates(['subset:0', 'subset:1', 'subset:2', 'combined', 'pcgrad'], 3)
		optimizer = Optimizer('momentum', 0.05, 0.9)
		trainer = Trainer(model, optimizer, candidates, 'exact', candidate_rng=4)

		for step in range(200):
			batch = random_batch(model, 20 + step)

			# Recompute the selection from copies of the state before the step
			reference_params = params.copy()
			reference_optimizer = copy.deepcopy(optimizer)
			reference_rng = copy.deepcopy(trainer.candidate_rng)
			baseline, gradients = model.losses_and_gradients(reference_params, batch)
			for task, (shared_gradient, task_gradient) in enumerate(gradients):
				reference_optimizer.apply_update(reference_params, task, task_gradient)
			shared_gradients = [shared_gradient for shared_gradient, task_gradient in gradients]
			candidate_gradients = [candidate.produce(shared_gradients, reference_rng) for candidate in candidates]
			totals = candidate_transference(
				model, reference_params, batch, reference_optimizer, candidate_gradients, reference_params.task_specific, baseline
			).sum(axis=1)
			reference_optimizer.apply_update(reference_params, 'shared', candidate_gradients[int(numpy.argmax(totals))])

			log = trainer.train_step(params, batch, step)

			msg = 'Step %s: the chosen candidate must be the argmax of the recomputed totals' % step
			self.assertEqual(log.chosen, int(numpy.argmax(totals)), msg=msg)
			numpy.testing.assert_allclose(log.totals, totals, rtol=1e-12, atol=1e-15, err_msg=msg)

			msg = 'Step %s: the parameters must match the recomputed update bit for bit' % step
			self.assertTrue(params.equals(reference_params), msg=msg)

	def test_second_order(self):
		'''Second order mode scores candidates by the second order expansion, exact on quadratics'''

		model, params, batch = quadratic_toy(0.5)
		candidates = parse_candidates(['subset:0', 'subset:1', 'combined'], 2)
		log = train_step(model, params, batch, Optimizer('sgd', 0.1), candidates, mode='second-order')

		msg = 'On the quadratic toy the second order totals must be the exact -0.08, -0.08 and 0'
		numpy.testing.assert_allclose(log.totals, [-0.08, -0.08, 0.0], rtol=0, atol=1e-8, err_msg=msg)
		self.assertEqual(log.chosen_id, 'combined', msg=msg)

		candidates = parse_candidates(['subset:0', 'subset:1', 'subset:2', 'combined'], 3)
		for seed in range(10):
			model, params, batch = random_quadratic(seed)
			logs = [
				train_step(model, params.copy(), batch, Optimizer('sgd', 0.05), candidates, mode=mode)
				for mode in ('exact', 'second-order')
			]

			msg = 'Seed %s: with SGD on quadratic wells, second order and exact totals must agree to 1e-8' % seed
			numpy.testing.assert_allclose(logs[1].totals, logs[0].totals, rtol=0, atol=1e-8, err_msg=msg)

	def test_first_order_agreement(self):
		'''With a small learning rate, exact and first order modes select the same candidate'''

		candidates = parse_candidates(['subset:0', 'subset:1', 'subset:2', 'combined'], 3)
		agreements = 0
		for seed in range(100):
			model, params, batch = random_quadratic(seed)
			chosen = [
				train_step(model, params.copy(), batch, Optimizer('sgd', 1e-3), candidates, mode=mode).chosen
				for mode in ('exact', 'first-order')
			]
			agreements += chosen[0] == chosen[1]

		msg = 'Exact and first order selection must agree on at least 95 of 100 quadratics, got %s' % agreements
		self.assertGreaterEqual(agreements, 95, msg=msg)

	def test_ties(self):
		'''Ties go to the lowest candidate index'''

		model, params, batch = quadratic_toy(0.5)
		trainer = Trainer(model, Optimizer('sgd', 0.1), parse_candidates(['subset:0', 'subset:1', 'combined'], 2))

		msg = 'Candidates with equal totals must resolve to the first one'
		self.assertEqual(trainer.select(numpy.array([-1.0, 2.0, 2.0])), 1, msg=msg)

	def test_rollback(self):
		'''A failing step leaves the parameters and the optimizer untouched'''

		model, params = tanh_network(seed=12)
		optimizer = Optimizer('momentum', 0.05, 0.9)
		candidates = parse_candidates(['combined'], 2) + [FailingCandidate()]
		trainer = Trainer(model, optimizer, candidates, 'exact', record_transference=True)

		batch = random_batch(model, 30)
		trainer.candidates = candidates[:1]
		trainer.train_step(params, batch, 0)
		trainer.candidates = candidates

		params_before = params.copy()
		optimizer_before = copy.deepcopy(optimizer)
		records_before = len(trainer.records)

		msg = 'The candidate failure must propagate'
		with self.assertRaises(RuntimeError, msg=msg):
			trainer.train_step(params, random_batch(model, 31), 1)

		msg = 'The parameters, the optimizer state and the records must be rolled back'
		self.assertTrue(params.equals(params_before), msg=msg)
		self.assertTrue(optimizer.equals(optimizer_before), msg=msg)
		self.assertEqual(len(trainer.records), records_before, msg=msg)
		self.assertEqual(len(trainer.step_logs), 1, msg=msg)


class TestTrain(TestCase):
	'''Test the Trainer.train method and the train function'''

	def test_plain_equals_exact(self):
		'''With a single candidate, IT-MTL reduces to plain training'''

		dataset = regression_dataset()
		model, initial = tanh_network(seed=1, input_dim=4)
		results = []
		for mode in ('plain', 'exact'):
			params = initial.copy()
			train(model, params, dataset, Optimizer('momentum', 0.05, 0.5), parse_candidates(['combined'], 2), 2, mode, batch_size=8, seed=3)
			results.append(params)

		msg = 'Plain and exact training with the combined candidate alone must give identical parameters'
		self.assertTrue(results[0].equals(results[1]), msg=msg)

	def test_zero_epochs(self):
		'''Zero epochs leave the parameters unchanged'''

		dataset = regression_dataset()
		model, params = tanh_network(seed=2, input_dim=4)
		initial = params.copy()
		artifacts = train(model, params, dataset, Optimizer('sgd', 0.1), parse_candidates(['combined'], 2), 0, batch_size=8)

		msg = 'Training for zero epochs must not change the parameters nor log any step'
		self.assertTrue(params.equals(initial), msg=msg)
		self.assertEqual(artifacts.step_logs, [], msg=msg)
		self.assertIsNone(artifacts.transference(), msg=msg)

	def test_determinism(self):
		'''Two runs with the same seed are identical'''

		dataset = regression_dataset()
		model, initial = tanh_network(seed=3, input_dim=4)
		candidates = parse_candidates(['subset:0', 'subset:1', 'combined', 'pcgrad'], 2)
		results = []
		for run in range(2):
			params = initial.copy()
			artifacts = train(model, params, dataset, Optimizer('sgd', 0.05), candidates, 2, 'exact', batch_size=8, seed=5)
			results.append((params, [log.chosen for log in artifacts.step_logs]))

		msg = 'The same seed must give the same parameters and the same choices'
		self.assertTrue(results[0][0].equals(results[1][0]), msg=msg)
		self.assertEqual(results[0][1], results[1][1], msg=msg)

	def test_measure(self):
		'''Measure mode records the transference of every task onto every task at every step'''

		dataset = regression_dataset(num_tasks=3)
		model, params = tanh_network(seed=4, input_dim=4, num_tasks=3)
		artifacts = train(model, params, dataset, Optimizer('sgd', 0.05), [], 2, 'measure', batch_size=8, seed=1)

		msg = 'Every step must record a 3 x 3 block of transference'
		self.assertEqual(len(artifacts.records), 3 * 9 * 2, msg=msg)

		msg = 'Measure mode must always apply combined'
		self.assertEqual(set(artifacts.choice_histogram()), {'combined'}, msg=msg)

		epochs, run = artifacts.transference()
		msg = 'The run matrix must cover all steps, and there must be one matrix per epoch'
		self.assertEqual(run.step_count, 6, msg=msg)
		self.assertEqual(len(epochs), 2, msg=msg)
		self.assertFalse(numpy.any(numpy.isnan(run.values)), msg=msg)

	def test_first_order(self):
		'''First order mode selects by log-product alignment, which favours the task closest to its minimum'''

		model, params, batch = quadratic_toy(0.25)
		candidates = parse_candidates(['subset:0', 'subset:1', 'combined'], 2)
		log = train_step(model, params, batch, Optimizer('sgd', 0.1), candidates, mode='first-order')

		msg = 'The alignment of subset:0 must be the highest at theta 0.25, where task 1 has the smaller loss'
		self.assertEqual(log.chosen_id, 'subset:0', msg=msg)

	def test_halving(self):
		'''The learning rate is halved at the configured epochs'''

		dataset = regression_dataset()
		model, params = tanh_network(seed=5, input_dim=4)
		artifacts = train(model, params, dataset, Optimizer('sgd', 0.1, halve_every=1), parse_candidates(['combined'], 2), 3, 'plain', batch_size=8)

		msg = 'The learning rate must be halved at every epoch'
		self.assertEqual([metrics['learning_rate'] for metrics in artifacts.epoch_metrics], [0.1, 0.05, 0.025], msg=msg)

		msg = 'Every epoch must report the validation losses'
		self.assertEqual(len(artifacts.epoch_metrics[0]['valid_loss']), 2, msg=msg)

	def test_curvature_mismatch(self):
		'''On ill conditioned quadratics, IT-MTL takes single task steps; the loss ratio and the timing of those steps are reported'''

		candidates = parse_candidates(['subset:0', 'subset:1', 'combined'], 2)
		final_losses = {'exact': [], 'plain': []}
		steps = single_choices = early_choices = 0
		for seed in range(10):
			spec = DatasetSpec('random-quadratic', sizes={'train': 16, 'valid': 0, 'test': 0}, seed=seed, num_tasks=2, dimension=4, kappa=50.0, noise=0.1)
			dataset = generate(spec)
			model = build_model(ModelSpec(4, losses=['quadratic', 'quadratic'], kind='quadratic', curvatures=dataset.attributes['curvatures']))
			initial = model.init_params(numpy.random.default_rng(seed))
			initial.shared[...] += 3.0
			for mode, mode_candidates in (('exact', candidates), ('plain', candidates[-1:])):
				params = initial.copy()
				artifacts = train(model, params, dataset, Optimizer('sgd', 0.01), mode_candidates, 6, mode, batch_size=4, seed=seed)
				final_losses[mode].append(float(numpy.sum(model.evaluate(params, *dataset.get_split('train'))[0])))
				if mode == 'exact':
					logs = artifacts.step_logs
					steps += len(logs)
					single_choices += sum(log.chosen_id != 'combined' for log in logs)
					early_choices += sum(log.chosen_id != 'combined' and log.step < len(logs) / 3 for log in logs)

		ratio = numpy.mean(final_losses['exact']) / numpy.mean(final_losses['plain'])
		single_share = single_choices / max(steps, 1)
		early_share = early_choices / max(single_choices, 1)
		logging.info('Curvature mismatch: final loss ratio %.3f, single task share %.3f, early share %.3f', ratio, single_share, early_share)
		if ratio > 1.02 or single_share < 0.05 or early_share <= 1 / 3:
			logging.warning('Curvature mismatch: the expected trend (lower loss, single task steps early in training) was not observed')

		msg = 'Every final loss must be finite'
		self.assertTrue(numpy.all(numpy.isfinite(final_losses['exact'] + final_losses['plain'])), msg=msg)

		msg = 'IT-MTL must choose a single task step at least once on ill conditioned quadratics'
		self.assertGreater(single_choices, 0, msg=msg)


if __name__ == '__main__':
	main()
