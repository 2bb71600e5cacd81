#!/usr/bin/env python3
import copy
import os
from unittest import TestCase, main
from tempfile import TemporaryDirectory
import numpy

from transference_tools import (
	ConfigurationError,
	Optimizer,
	lookahead_losses,
	probe_1d,
	probe_2d,
	read_json,
	read_table,
)
from tests.toys import quadratic_toy, tanh_network, random_batch


class TestProbe1D(TestCase):
	'''Test the probe_1d function'''

	def test_end_points(self):
		'''The samples at 0 and 1 are the baseline and the lookahead losses'''

		model, params = tanh_network(seed=8)
		batch = random_batch(model, 9)
		optimizer = Optimizer('momentum', 0.1, 0.9)
		optimizer.apply_update(params.copy(), 'shared', numpy.ones_like(params.shared))
		gradient = model.task_gradients(params, batch)[0][0]
		grid = probe_1d(model, params, batch, optimizer, gradient, samples=6, extent=2.0)

		msg = 'The losses at alpha 0 must be the baseline losses bit for bit'
		numpy.testing.assert_array_equal(grid.losses_at(0.0), model.forward_losses(params, batch), err_msg=msg)

		msg = 'The losses at alpha 1 must be the lookahead losses bit for bit, momentum included'
		numpy.testing.assert_array_equal(grid.losses_at(1.0), lookahead_losses(model, params, batch, optimizer, gradient), err_msg=msg)

		msg = 'Alpha 1 must be sampled even when the linspace misses it'
		self.assertEqual(len(grid.coordinates[0]), 7, msg=msg)

	def test_quadratic_toy(self):
		'''Test the total of the toy along the step of task 1'''

		model, params, batch = quadratic_toy(0.5)
		grid = probe_1d(model, params, batch, Optimizer('sgd', 0.1), numpy.array([1.0]), samples=11, extent=2.0)

		msg = 'At alpha 1 theta is 0.4 so the total must be 0.16 + 0.36 = 0.52'
		self.assertAlmostEqual(grid.totals[numpy.flatnonzero(grid.coordinates[0] == 1.0)[0]], 0.52, places=14, msg=msg)

		msg = 'The curves of quadratic losses must be parabolas in alpha'
		for task in range(2):
			coefficients, residuals, rank, singular_values, rcond = numpy.polyfit(grid.coordinates[0], grid.losses[:, task], 2, full=True)
			self.assertLessEqual(residuals[0] if len(residuals) else 0.0, 1e-10, msg=msg)

	def test_errors(self):
		'''Test the errors of the probe_1d function'''

		model, params, batch = quadratic_toy(0.5)

		msg = 'Less than 2 samples must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			probe_1d(model, params, batch, Optimizer('sgd', 0.1), numpy.array([1.0]), samples=1)


class TestProbe2D(TestCase):
	'''Test the probe_2d function'''

	def test_grid(self):
		'''Test the directions and the samples of a 2-D probe'''

		model, params = tanh_network(seed=10)
		batch = random_batch(model, 11)
		grid = probe_2d(model, params, batch, 0, grid=5, radius=0.2)

		msg = 'Both directions must have the norm of the shared parameters'
		for direction in grid.directions:
			self.assertAlmostEqual(numpy.linalg.norm(direction), numpy.linalg.norm(params.shared), delta=1e-12 * numpy.linalg.norm(params.shared), msg=msg)

		msg = 'The centre of the grid must be the baseline bit for bit'
		numpy.testing.assert_array_equal(grid.losses_at(0.0, 0.0), model.forward_losses(params, batch), err_msg=msg)

		msg = 'A 5x5 grid must have 25 rows, with coordinates, task losses and total columns'
		table = grid.to_table(['left', 'right'])
		self.assertEqual(len(table), 25, msg=msg)
		self.assertEqual(table.colnames, ['u', 'v', 'left', 'right', 'total'], msg=msg)

		msg = 'The combined surface must be the mean of the task losses'
		numpy.testing.assert_allclose(grid.totals, grid.losses.mean(axis=2), rtol=1e-15, err_msg=msg)

	def test_write(self):
		'''Test the LandscapeGrid write method'''

		model, params = tanh_network(seed=10)
		batch = random_batch(model, 11)
		grid = probe_2d(model, params, batch, 0, grid=3)

		with TemporaryDirectory() as directory:
			file_path = os.path.join(directory, 'landscape_2d.csv')
			grid.write(file_path, config_hash='abc')

			msg = 'The CSV must hold every sample'
			self.assertEqual(len(read_table(file_path)), 9, msg=msg)

			msg = 'The sidecar must locate the minimum of the combined surface'
			sidecar = read_json(file_path + '.json')
			self.assertEqual(tuple(sidecar['argmin']['total']), grid.argmin(), msg=msg)
			self.assertEqual(len(sidecar['argmin']['tasks']), 2, msg=msg)

	def test_errors(self):
		'''Test the errors of the probe_2d function'''

		model, params = tanh_network(seed=10)
		batch = random_batch(model, 11)

		msg = 'A grid below 3 must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			probe_2d(model, params, batch, 0, grid=2)

		msg = 'Zero shared parameters must raise a ConfigurationError'
		params.shared[...] = 0.0
		with self.assertRaises(ConfigurationError, msg=msg):
			probe_2d(model, params, batch, 0, grid=3)

class TestLandscapeState(TestCase):
	'''Test that sampling the landscape leaves the training state untouched'''

	def test_state_unchanged(self):
		'''probe_1d and probe_2d never change the parameters nor the optimizer state'''

		model, params = tanh_network(seed=12, num_tasks=3)
		batch = random_batch(model, 13)
		optimizer = Optimizer('momentum', 0.1, 0.9)
		optimizer.apply_update(params, 'shared', model.task_gradients(params, batch)[1][0])
		params_before = params.copy()
		optimizer_before = copy.deepcopy(optimizer)

		gradient = model.task_gradients(params, batch)[0][0]
		probe_1d(model, params, batch, optimizer, gradient, samples=5)

		msg = 'probe_1d must leave the parameters and the momentum buffers unchanged'
		self.assertTrue(params.equals(params_before), msg=msg)
		self.assertTrue(optimizer.equals(optimizer_before), msg=msg)

		probe_2d(model, params, batch, 3, grid=3)

		msg = 'probe_2d must leave the parameters and the optimizer unchanged'
		self.assertTrue(params.equals(params_before), msg=msg)
		self.assertTrue(optimizer.equals(optimizer_before), msg=msg)



if __name__ == '__main__':
	main()
