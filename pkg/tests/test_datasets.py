#!/usr/bin/env python3
import os
from unittest import TestCase, main
from tempfile import TemporaryDirectory
import numpy

from transference_tools import (
	ConfigurationError,
	DatasetSpec,
	ModelSpec,
	Optimizer,
	build_model,
	generate,
	glyph_alphabet,
	load_dataset,
	relatedness_gram,
	train,
)


def regression_weights(num_tasks, rho, seed=0):
	spec = DatasetSpec('related-regression', sizes={'train': 4, 'valid': 0, 'test': 0}, seed=seed, num_tasks=num_tasks, rho=rho)
	return numpy.array(generate(spec).attributes['task_weights'])


def spearman(first, second):
	'''Rank correlation of two samples without ties'''
	first_ranks = numpy.argsort(numpy.argsort(first))
	second_ranks = numpy.argsort(numpy.argsort(second))
	return numpy.corrcoef(first_ranks, second_ranks)[0, 1]


def measured_transference(rho, num_tasks, dataset_seed, seed, epochs=2):
	'''Run level transference matrix of a measure run on a related regression dataset'''

	spec = DatasetSpec('related-regression', sizes={'train': 256, 'valid': 0, 'test': 0}, seed=dataset_seed, num_tasks=num_tasks, rho=rho)
	dataset = generate(spec)
	model = build_model(ModelSpec(dataset.input_dim, [(16, 'tanh')], [[(1, 'linear')]] * num_tasks, ['mse'] * num_tasks, shared_head_init=True))
	params = model.init_params(numpy.random.default_rng(seed))
	artifacts = train(model, params, dataset, Optimizer('sgd', 0.05), [], epochs, 'measure', batch_size=32, seed=seed)
	epoch_matrices, run_matrix = artifacts.transference()
	return run_matrix.values


class TestDatasetSpec(TestCase):
	'''Test the DatasetSpec class'''

	def test_init(self):
		'''Test the __init__ method'''

		msg = 'An unknown kind must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			DatasetSpec('spirals')

		msg = 'An option of another kind must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			DatasetSpec('overlap-glyph', rho=0.5)

		msg = 'An empty train split must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			DatasetSpec('overlap-glyph', sizes={'train': 0})

	def test_from_dict(self):
		'''Test the from_dict method'''

		msg = 'A spec without kind must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			DatasetSpec.from_dict({'seed': 1})

		msg = 'A spec must survive to_dict and from_dict'
		spec = DatasetSpec('related-regression', seed=4, rho=0.25)
		self.assertEqual(DatasetSpec.from_dict(spec.to_dict()).to_dict(), spec.to_dict(), msg=msg)


class TestContainer(TestCase):
	'''Test the save method and the load_dataset function'''

	def test_determinism(self):
		'''The same spec gives the same bytes'''

		spec = DatasetSpec('overlap-glyph', sizes={'train': 20, 'valid': 5, 'test': 5}, seed=3, overlap=0.3)
		with TemporaryDirectory() as directory:
			contents = []
			for index in range(2):
				file_path = os.path.join(directory, 'glyph_%s.mtds' % index)
				generate(spec).save(file_path)
				with open(file_path, 'rb') as file:
					contents.append(file.read())

			msg = 'Generating twice from the same spec must write identical files'
			self.assertEqual(contents[0], contents[1], msg=msg)

	def test_load(self):
		'''A saved dataset loads back identical'''

		dataset = generate(DatasetSpec('related-regression', sizes={'train': 10, 'valid': 3, 'test': 2}, seed=1, num_tasks=3))
		with TemporaryDirectory() as directory:
			file_path = os.path.join(directory, 'regression.mtds')
			dataset.save(file_path)
			loaded = load_dataset(file_path)

			msg = 'The splits must load back bit for bit'
			for split in ('train', 'valid', 'test'):
				inputs, labels = dataset.splits[split]
				loaded_inputs, loaded_labels = loaded.splits[split]
				numpy.testing.assert_array_equal(loaded_inputs, inputs, err_msg=msg)
				for label, loaded_label in zip(labels, loaded_labels):
					numpy.testing.assert_array_equal(loaded_label, label, err_msg=msg)
					self.assertEqual(loaded_label.dtype, label.dtype, msg=msg)

			msg = 'The spec, task kinds and attributes must load back'
			self.assertEqual(loaded.spec.to_dict(), dataset.spec.to_dict(), msg=msg)
			self.assertEqual(loaded.task_kinds, ['regression'] * 3, msg=msg)
			numpy.testing.assert_array_equal(loaded.attributes['task_weights'], dataset.attributes['task_weights'], err_msg=msg)

			msg = 'A truncated file must raise a ConfigurationError'
			with open(file_path, 'rb') as file:
				content = file.read()
			with open(file_path, 'wb') as file:
				file.write(content[:-17])
			with self.assertRaises(ConfigurationError, msg=msg):
				load_dataset(file_path)
			with open(file_path, 'wb') as file:
				file.write(content[:8])
			with self.assertRaises(ConfigurationError, msg=msg):
				load_dataset(file_path)

			msg = 'A file with trailing bytes must raise a ConfigurationError'
			with open(file_path, 'ab') as file:
				file.write(b'\0')
			with self.assertRaises(ConfigurationError, msg=msg):
				load_dataset(file_path)

			msg = 'A file without the magic bytes must raise a ConfigurationError'
			with open(file_path, 'wb') as file:
				file.write(b'not a dataset')
			with self.assertRaises(ConfigurationError, msg=msg):
				load_dataset(file_path)

	def test_iter_batches(self):
		'''Test the iter_batches method'''

		dataset = generate(DatasetSpec('related-regression', sizes={'train': 10, 'valid': 0, 'test': 0}))

		msg = 'Batches must cover the split, the last one smaller'
		sizes = [batch.size for batch in dataset.iter_batches('train', 4, numpy.random.default_rng(0))]
		self.assertEqual(sizes, [4, 4, 2], msg=msg)
		self.assertEqual(dataset.steps_per_epoch(4), 3, msg=msg)


class TestRelatedRegression(TestCase):
	'''Test the related-regression generator'''

	def test_relatedness_gram(self):
		'''Test the relatedness_gram function'''

		msg = 'rho below -1/(m-1) is infeasible and the error must give the bound'
		with self.assertRaises(ConfigurationError, msg=msg) as context:
			relatedness_gram(3, -0.6)
		self.assertIn('-0.5', str(context.exception), msg=msg)

		msg = 'rho outside of [-1, 1] must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			relatedness_gram(2, 1.5)

		msg = 'A non symmetric rho matrix must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			relatedness_gram(2, [[1.0, 0.5], [0.4, 1.0]])

		msg = 'A rho matrix that is not positive semi-definite must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			relatedness_gram(3, [[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])

	def test_weights(self):
		'''The task weight vectors have pairwise cosine rho'''

		msg = 'rho 0 must give orthonormal task weights'
		weights = regression_weights(3, 0.0)
		numpy.testing.assert_allclose(weights @ weights.T, numpy.eye(3), atol=1e-12, err_msg=msg)

		msg = 'rho 0.5 with 3 tasks must give pairwise cosines of 0.5'
		weights = regression_weights(3, 0.5)
		norms = numpy.linalg.norm(weights, axis=1)
		cosines = (weights @ weights.T) / numpy.outer(norms, norms)
		numpy.testing.assert_allclose(cosines[~numpy.eye(3, dtype=bool)], 0.5, atol=1e-12, err_msg=msg)

		msg = 'rho 1 must give duplicated tasks with identical labels'
		spec = DatasetSpec('related-regression', sizes={'train': 8, 'valid': 0, 'test': 0}, num_tasks=2, rho=1.0)
		dataset = generate(spec)
		inputs, labels = dataset.get_split('train')
		numpy.testing.assert_array_equal(labels[0], labels[1], err_msg=msg)

		msg = 'A rho matrix must give the matching cosines'
		rho = [[1.0, 0.8, -0.2], [0.8, 1.0, 0.1], [-0.2, 0.1, 1.0]]
		weights = regression_weights(3, rho)
		norms = numpy.linalg.norm(weights, axis=1)
		numpy.testing.assert_allclose((weights @ weights.T) / numpy.outer(norms, norms), rho, atol=1e-12, err_msg=msg)

	def test_monotonic_transference(self):
		'''The measured cross-task transference grows with the relatedness of the tasks'''

		means = []
		for rho in (-0.5, 0.0, 0.9):
			values = [measured_transference(rho, 2, seed, seed) for seed in range(5)]
			means.append(numpy.mean([matrix[0, 1] for matrix in values]))

		msg = 'The mean transference of task 0 onto task 1 must strictly increase with rho, got %s' % means
		self.assertTrue(means[0] < means[1] < means[2], msg=msg)

	def test_reproducible_transference(self):
		'''Two training seeds rank the task pairs alike'''

		# Tasks at angles 0, 40, 100 and 150 degrees in a plane
		angles = numpy.radians([0.0, 40.0, 100.0, 150.0])
		rho = numpy.cos(angles[:, None] - angles[None, :])
		rho = (rho + rho.T) / 2
		numpy.fill_diagonal(rho, 1.0)

		off_diagonal = ~numpy.eye(4, dtype=bool)
		first = measured_transference(rho.tolist(), 4, 0, 1)[off_diagonal]
		second = measured_transference(rho.tolist(), 4, 0, 2)[off_diagonal]

		msg = 'The rank correlation of the off-diagonal transference between two seeds must be at least 0.8'
		self.assertGreaterEqual(spearman(first, second), 0.8, msg=msg)


class TestOverlapGlyph(TestCase):
	'''Test the overlap-glyph generator'''

	def test_generate(self):
		'''Test the generated images and labels'''

		spec = DatasetSpec('overlap-glyph', sizes={'train': 12, 'valid': 4, 'test': 4}, seed=2, overlap=0.5)
		dataset = generate(spec)

		msg = 'There must be two classification tasks over 10 classes'
		self.assertEqual(dataset.task_kinds, ['classification', 'classification'], msg=msg)
		inputs, labels = dataset.get_split('train')
		self.assertTrue(all(label.max() < 10 for label in labels), msg=msg)

		msg = 'The inputs must be the flattened rasters'
		self.assertEqual(inputs.shape, (12, 400), msg=msg)

		msg = 'An overlap of 0.5 must place the right glyph half a glyph width to the right'
		self.assertEqual(dataset.attributes['offset'], 5, msg=msg)

	def test_errors(self):
		'''Test the errors of the overlap-glyph generator'''

		msg = 'A raster too small for the two glyphs must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			generate(DatasetSpec('overlap-glyph', raster_width=15))

		msg = 'An overlap above 0.9 must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			generate(DatasetSpec('overlap-glyph', overlap=0.95))

	def test_clean_half(self):
		'''Without overlap, the left half of the raster only holds the left glyph'''

		spec = DatasetSpec('overlap-glyph', sizes={'train': 40, 'valid': 0, 'test': 0}, seed=5, overlap=0.0, noise=0.0)
		dataset = generate(spec)
		glyphs = glyph_alphabet(14, 10, 2)
		inputs, labels = dataset.get_split('train')
		halves = inputs.reshape(-1, 20, 20)[:, :, :10]

		msg = 'The left half must be the left glyph at some row shift, and nothing else'
		for half, label in zip(halves, labels[0]):
			placed = []
			for shift in range(7):
				template = numpy.zeros((20, 10))
				template[shift:shift + 14] = glyphs[label]
				placed.append(numpy.array_equal(half, template))
			self.assertTrue(any(placed), msg=msg)

		msg = 'Identical left halves must have equal left labels'
		for first in range(len(halves)):
			for second in range(first + 1, len(halves)):
				if numpy.array_equal(halves[first], halves[second]):
					self.assertEqual(labels[0][first], labels[0][second], msg=msg)

	def test_clean_half_classifier(self):
		'''Without overlap, a single task classifier on the left half reaches 95% test accuracy'''

		spec = DatasetSpec('overlap-glyph', sizes={'train': 20, 'valid': 0, 'test': 200}, seed=6, overlap=0.0)
		dataset = generate(spec)
		glyphs = glyph_alphabet(14, 10, 2)

		templates = numpy.zeros((len(glyphs), 7, 20, 10))
		for glyph in range(len(glyphs)):
			for shift in range(7):
				templates[glyph, shift, shift:shift + 14] = glyphs[glyph]

		inputs, labels = dataset.get_split('test')
		halves = inputs.reshape(-1, 20, 20)[:, :, :10]
		distances = numpy.sum((halves[:, None, None] - templates[None]) ** 2, axis=(3, 4))
		predictions = numpy.argmin(distances.min(axis=2), axis=1)
		accuracy = numpy.mean(predictions == labels[0])

		msg = 'Template matching on the left half must classify at least 95%% of the test set, got %s' % accuracy
		self.assertGreaterEqual(accuracy, 0.95, msg=msg)


class TestRandomQuadratic(TestCase):
	'''Test the random-quadratic generator'''

	def test_condition_number(self):
		'''Task 0 has the requested condition number, the other tasks are isotropic'''

		spec = DatasetSpec('random-quadratic', sizes={'train': 4, 'valid': 0, 'test': 0}, num_tasks=3, dimension=5, kappa=50.0)
		curvatures = [numpy.array(matrix) for matrix in generate(spec).attributes['curvatures']]

		msg = 'The curvature of task 0 must have condition number kappa'
		self.assertAlmostEqual(numpy.linalg.cond(curvatures[0]), 50.0, delta=1e-8, msg=msg)

		msg = 'The other tasks must have identity curvature'
		numpy.testing.assert_array_equal(curvatures[2], numpy.eye(5), err_msg=msg)

		msg = 'kappa below 1 must raise a ConfigurationError'
		with self.assertRaises(ConfigurationError, msg=msg):
			generate(DatasetSpec('random-quadratic', kappa=0.5))


if __name__ == '__main__':
	main()
