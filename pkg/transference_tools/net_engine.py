import numpy

from .errors import ConfigurationError, NumericError
from .utils import atomic_path, write_json, read_json

__all__ = [
	'ParamLayout',
	'ParamSet',
	'Batch',
	'ModelSpec',
	'Model',
	'DenseNetwork',
	'QuadraticModel',
	'build_model',
	'flatten',
	'unflatten',
	'load_checkpoint',
	'ACTIVATIONS',
	'LOSS_KINDS',
]

ACTIVATIONS = ('linear', 'tanh', 'relu', 'sigmoid')

LOSS_KINDS = ('cross_entropy', 'mse', 'quadratic')


def flatten(arrays):
	"""Concatenate a list of arrays into one flat float64 vector"""
	if not arrays:
		return numpy.zeros(0)
	return numpy.concatenate([numpy.asarray(array, dtype=numpy.float64).ravel() for array in arrays])


def unflatten(vector, shapes):
	"""Split a flat vector into arrays of the given shapes (views on the vector)"""
	arrays = []
	offset = 0
	for shape in shapes:
		size = int(numpy.prod(shape, dtype=numpy.int64))
		arrays.append(vector[offset:offset + size].reshape(shape))
		offset += size

	if offset != len(vector):
		raise ConfigurationError('Vector of size %s does not match layout of size %s' % (len(vector), offset))

	return arrays


class ParamLayout:
	"""Shapes of the arrays packed into the shared vector and into each task-specific vector"""

	def __init__(self, shared_shapes, task_shapes):
		self.shared_shapes = [tuple(shape) for shape in shared_shapes]
		self.task_shapes = [[tuple(shape) for shape in shapes] for shapes in task_shapes]

	@property
	def num_tasks(self):
		return len(self.task_shapes)

	@property
	def shared_size(self):
		return sum(int(numpy.prod(shape, dtype=numpy.int64)) for shape in self.shared_shapes)

	def task_size(self, task):
		return sum(int(numpy.prod(shape, dtype=numpy.int64)) for shape in self.task_shapes[task])

	def to_dict(self):
		return {
			'shared_shapes': [list(shape) for shape in self.shared_shapes],
			'task_shapes': [[list(shape) for shape in shapes] for shapes in self.task_shapes],
		}

	@classmethod
	def from_dict(cls, data):
		return cls(data['shared_shapes'], data['task_shapes'])

	def __eq__(self, other):
		return (
			isinstance(other, ParamLayout)
			and self.shared_shapes == other.shared_shapes
			and self.task_shapes == other.task_shapes
		)


class ParamSet:
	"""Model parameters split into the shared trunk vector and one vector per task"""

	def __init__(self, shared, task_specific, layout=None):
		self.shared = numpy.asarray(shared, dtype=numpy.float64)
		self.task_specific = [numpy.asarray(vector, dtype=numpy.float64) for vector in task_specific]

		if layout is None:
			layout = ParamLayout([self.shared.shape], [[vector.shape] for vector in self.task_specific])
		self.layout = layout

		if not self.task_specific:
			raise ConfigurationError('A parameter set needs at least one task')
		if len(self.task_specific) != layout.num_tasks:
			raise ConfigurationError(
				'Got %s task-specific vectors for a layout of %s tasks' % (len(self.task_specific), layout.num_tasks)
			)
		if self.shared.size != layout.shared_size:
			raise ConfigurationError('Shared vector has size %s, layout expects %s' % (self.shared.size, layout.shared_size))
		for task, vector in enumerate(self.task_specific):
			if vector.size != layout.task_size(task):
				raise ConfigurationError(
					'Task %s vector has size %s, layout expects %s' % (task, vector.size, layout.task_size(task))
				)

	@property
	def num_tasks(self):
		return len(self.task_specific)

	def shared_arrays(self):
		return unflatten(self.shared, self.layout.shared_shapes)

	def task_arrays(self, task):
		return unflatten(self.task_specific[task], self.layout.task_shapes[task])

	def copy(self):
		return ParamSet(self.shared.copy(), [vector.copy() for vector in self.task_specific], self.layout)

	def snapshot(self):
		"""Return a read-only copy, safe to share with concurrent evaluators"""
		snapshot = self.copy()
		snapshot.shared.setflags(write=False)
		for vector in snapshot.task_specific:
			vector.setflags(write=False)
		return snapshot

	def with_shared(self, shared, task_specific=None):
		"""Return a parameter set with replaced shared (and optionally task-specific) vectors, sharing the rest"""
		if task_specific is None:
			task_specific = self.task_specific
		return ParamSet(shared, task_specific, self.layout)

	def assign(self, other):
		"""Copy the values of other into this parameter set in place"""
		self.shared[...] = other.shared
		for vector, other_vector in zip(self.task_specific, other.task_specific):
			vector[...] = other_vector

	def is_finite(self):
		return bool(numpy.all(numpy.isfinite(self.shared))) and all(
			numpy.all(numpy.isfinite(vector)) for vector in self.task_specific
		)

	def equals(self, other):
		"""Bitwise equality of all parameter vectors"""
		return (
			self.layout == other.layout
			and numpy.array_equal(self.shared, other.shared)
			and all(numpy.array_equal(a, b) for a, b in zip(self.task_specific, other.task_specific))
		)

	def save(self, file_path, metadata=None):
		"""Write the parameters as little-endian float64 binary with a JSON sidecar describing the layout"""

		vector = flatten([self.shared] + self.task_specific).astype('<f8')
		with atomic_path(file_path) as temporary_path:
			vector.tofile(temporary_path)

		sidecar = {
			'layout': self.layout.to_dict(),
			'dtype': '<f8',
			'size': int(vector.size),
			'metadata': metadata or {},
		}
		write_json(file_path + '.json', sidecar)


def load_checkpoint(file_path):
	"""Read a parameter checkpoint written by ParamSet.save"""

	sidecar = read_json(file_path + '.json')
	layout = ParamLayout.from_dict(sidecar['layout'])
	vector = numpy.fromfile(file_path, dtype=sidecar['dtype']).astype(numpy.float64)

	if vector.size != sidecar['size']:
		raise RuntimeError('Checkpoint "%s" has %s values, sidecar announces %s' % (file_path, vector.size, sidecar['size']))

	sizes = [layout.shared_size] + [layout.task_size(task) for task in range(layout.num_tasks)]
	vectors = numpy.split(vector, numpy.cumsum(sizes)[:-1])
	return ParamSet(vectors[0].copy(), [part.copy() for part in vectors[1:]], layout)


class Batch:
	"""A fixed minibatch: inputs and one label array per task"""

	def __init__(self, inputs, labels, batch_id=0):
		self.inputs = numpy.asarray(inputs, dtype=numpy.float64)
		if self.inputs.ndim == 1:
			self.inputs = self.inputs.reshape(-1, 1)
		self.labels = [numpy.asarray(label) for label in labels]
		self.batch_id = batch_id

		if self.size < 1:
			raise ConfigurationError('A batch needs at least one example')
		for task, label in enumerate(self.labels):
			if len(label) != self.size:
				raise ConfigurationError('Labels of task %s have length %s, batch size is %s' % (task, len(label), self.size))

	@property
	def size(self):
		return self.inputs.shape[0]

	@property
	def num_tasks(self):
		return len(self.labels)


class ModelSpec:
	"""Architecture and loss definition of a hard parameter sharing model"""

	def __init__(
		self,
		input_dim,
		trunk_layers=(),
		head_layers=None,
		losses=('mse',),
		loss_weights=None,
		kind='dense',
		curvatures=None,
		shared_head_init=False,
		init_scale=1.0,
	):
		self.kind = kind
		self.input_dim = int(input_dim)
		self.trunk_layers = [(int(width), activation) for width, activation in trunk_layers]
		self.losses = list(losses)
		num_tasks = len(self.losses)
		if head_layers is None:
			head_layers = [[] for task in range(num_tasks)]
		self.head_layers = [[(int(width), activation) for width, activation in layers] for layers in head_layers]
		self.loss_weights = [1.0] * num_tasks if loss_weights is None else [float(weight) for weight in loss_weights]
		self.curvatures = None if curvatures is None else [numpy.asarray(matrix, dtype=numpy.float64) for matrix in curvatures]
		self.shared_head_init = bool(shared_head_init)
		self.init_scale = float(init_scale)
		self.validate()

	@property
	def num_tasks(self):
		return len(self.losses)

	def validate(self):
		"""Check the model spec is consistent, raise a ConfigurationError otherwise"""

		if self.num_tasks < 1:
			raise ConfigurationError('A model needs at least one task')
		if len(self.loss_weights) != self.num_tasks:
			raise ConfigurationError('Got %s loss weights for %s tasks' % (len(self.loss_weights), self.num_tasks))
		if any(weight <= 0 for weight in self.loss_weights):
			raise ConfigurationError('Loss weights must be positive')
		for loss in self.losses:
			if loss not in LOSS_KINDS:
				raise ConfigurationError('Unknown loss kind "%s", must be one of %s' % (loss, ', '.join(LOSS_KINDS)))

		if self.kind == 'quadratic':
			if self.curvatures is None or len(self.curvatures) != self.num_tasks:
				raise ConfigurationError('A quadratic model needs one curvature matrix per task')
			for task, matrix in enumerate(self.curvatures):
				if matrix.shape != (self.dimension, self.dimension):
					raise ConfigurationError('Curvature of task %s has shape %s' % (task, matrix.shape))
			if any(loss != 'quadratic' for loss in self.losses):
				raise ConfigurationError('All losses of a quadratic model must be "quadratic"')

		elif self.kind == 'dense':
			if self.input_dim < 1:
				raise ConfigurationError('input_dim must be positive')
			if len(self.head_layers) != self.num_tasks:
				raise ConfigurationError('Got %s heads for %s tasks' % (len(self.head_layers), self.num_tasks))
			if not self.trunk_layers and not any(self.head_layers):
				raise ConfigurationError('A dense model needs at least one layer')
			for width, activation in self.trunk_layers + [layer for layers in self.head_layers for layer in layers]:
				if width < 1:
					raise ConfigurationError('Layer widths must be positive, got %s' % width)
				if activation not in ACTIVATIONS:
					raise ConfigurationError(
						'Unknown activation "%s", must be one of %s' % (activation, ', '.join(ACTIVATIONS))
					)
			for task, loss in enumerate(self.losses):
				if loss == 'quadratic':
					raise ConfigurationError('Loss "quadratic" is only valid for quadratic models')
				if loss == 'cross_entropy' and self.output_width(task) < 2:
					raise ConfigurationError('Task %s uses cross entropy but has %s output' % (task, self.output_width(task)))
			if self.shared_head_init and len({tuple(layers) for layers in self.head_layers}) > 1:
				raise ConfigurationError('shared_head_init requires identical head architectures')

		else:
			raise ConfigurationError('Unknown model kind "%s", must be dense or quadratic' % self.kind)

	@property
	def dimension(self):
		"""Size of the shared vector of a quadratic model"""
		return self.input_dim

	def output_width(self, task):
		"""Width of the output of the given task"""
		if self.head_layers[task]:
			return self.head_layers[task][-1][0]
		elif self.trunk_layers:
			return self.trunk_layers[-1][0]
		return self.input_dim

	def to_dict(self):
		data = {
			'kind': self.kind,
			'input_dim': self.input_dim,
			'trunk_layers': [[width, activation] for width, activation in self.trunk_layers],
			'head_layers': [[[width, activation] for width, activation in layers] for layers in self.head_layers],
			'losses': self.losses,
			'loss_weights': self.loss_weights,
			'shared_head_init': self.shared_head_init,
			'init_scale': self.init_scale,
		}
		if self.curvatures is not None:
			data['curvatures'] = [matrix.tolist() for matrix in self.curvatures]
		return data

	@classmethod
	def from_dict(cls, data):
		data = dict(data)
		unknown = set(data) - {
			'kind',
			'input_dim',
			'trunk_layers',
			'head_layers',
			'losses',
			'loss_weights',
			'curvatures',
			'shared_head_init',
			'init_scale',
		}
		if unknown:
			raise ConfigurationError('Unknown model fields: %s' % ', '.join(sorted(unknown)))
		try:
			return cls(**data)
		except (TypeError, ValueError) as error:
			if isinstance(error, ConfigurationError):
				raise
			raise ConfigurationError('Invalid model spec: %s' % error) from error


class Model:
	"""Base class of the differentiable multi-task models, override the get_* methods and forward"""

	# Relative step of the finite difference Hessian-vector product
	HVP_RELATIVE_STEP = 1e-4

	def __init__(self, spec):
		self.spec = spec

	@property
	def num_tasks(self):
		return self.spec.num_tasks

	def get_layout(self):
		raise NotImplementedError()

	def init_params(self, rng):
		"""Return freshly initialized parameters, rng is a numpy Generator or a seed"""
		raise NotImplementedError()

	def losses_and_gradients(self, params, batch, gradients=True):
		"""Return the per-task losses and, if asked, the list of (shared gradient, task gradient) pairs"""
		raise NotImplementedError()

	def check_batch(self, batch):
		if batch.num_tasks != self.num_tasks:
			raise ConfigurationError('Batch has labels for %s tasks, model has %s' % (batch.num_tasks, self.num_tasks))

	def forward_losses(self, params, batch):
		"""Return the vector of per-task losses L_i(X, shared, task_i)"""
		losses, gradients = self.losses_and_gradients(params, batch, gradients=False)
		return losses

	def task_gradients(self, params, batch):
		"""Return for every task the pair (gradient wrt shared, gradient wrt own task parameters)"""
		losses, gradients = self.losses_and_gradients(params, batch)
		return gradients

	def hessian_vector_product(self, params, batch, task, vector, epsilon=None):
		"""Return H_task v with respect to the shared parameters, by central differences of the gradient"""

		vector = numpy.asarray(vector, dtype=numpy.float64)
		if vector.shape != params.shared.shape:
			raise ConfigurationError('Vector has shape %s, shared parameters %s' % (vector.shape, params.shared.shape))
		if not numpy.all(numpy.isfinite(vector)):
			raise NumericError('Hessian-vector product of a non-finite vector')

		norm = numpy.linalg.norm(vector)
		if norm == 0:
			return numpy.zeros_like(params.shared)

		if epsilon is None:
			epsilon = self.HVP_RELATIVE_STEP * (1.0 + numpy.linalg.norm(params.shared))

		direction = vector / norm
		plus = self.task_gradients(params.with_shared(params.shared + epsilon * direction), batch)[task][0]
		minus = self.task_gradients(params.with_shared(params.shared - epsilon * direction), batch)[task][0]
		product = (plus - minus) * (norm / (2.0 * epsilon))

		if not numpy.all(numpy.isfinite(product)):
			raise NumericError('Non-finite Hessian-vector product for task %s' % task)

		return product

	def evaluate(self, params, inputs, labels, batch_size=1024):
		"""Return per-task mean losses and accuracies (NaN for non classification tasks) over a whole split"""

		total_losses = numpy.zeros(self.num_tasks)
		correct = numpy.zeros(self.num_tasks)
		count = len(inputs)

		for start in range(0, count, batch_size):
			batch = Batch(inputs[start:start + batch_size], [label[start:start + batch_size] for label in labels])
			total_losses += self.forward_losses(params, batch) * batch.size
			outputs = self.predict(params, batch.inputs)
			for task, loss in enumerate(self.spec.losses):
				if loss == 'cross_entropy':
					correct[task] += numpy.sum(numpy.argmax(outputs[task], axis=1) == batch.labels[task])

		accuracies = numpy.array(
			[correct[task] / count if loss == 'cross_entropy' else numpy.nan for task, loss in enumerate(self.spec.losses)]
		)
		return total_losses / count, accuracies

	def predict(self, params, inputs):
		"""Return the per-task outputs, override for models with outputs"""
		return [None] * self.num_tasks


class DenseNetwork(Model):
	"""Multi-layer perceptron with a shared trunk and one head per task"""

	def get_layout(self):
		shared_shapes = []
		width = self.spec.input_dim
		for layer_width, activation in self.spec.trunk_layers:
			shared_shapes += [(width, layer_width), (layer_width,)]
			width = layer_width

		trunk_width = width
		task_shapes = []
		for layers in self.spec.head_layers:
			shapes = []
			width = trunk_width
			for layer_width, activation in layers:
				shapes += [(width, layer_width), (layer_width,)]
				width = layer_width
			task_shapes.append(shapes)

		return ParamLayout(shared_shapes, task_shapes)

	def init_params(self, rng):
		"""Uniform fan-in initialization of the weights, zero biases"""

		rng = numpy.random.default_rng(rng)
		layout = self.get_layout()

		shared = flatten([self.init_array(shape, rng) for shape in layout.shared_shapes])

		task_specific = []
		for task, shapes in enumerate(layout.task_shapes):
			if self.spec.shared_head_init and task > 0:
				task_specific.append(task_specific[0].copy())
			else:
				task_specific.append(flatten([self.init_array(shape, rng) for shape in shapes]))

		return ParamSet(shared, task_specific, layout)

	def init_array(self, shape, rng):
		if len(shape) == 1:
			return numpy.zeros(shape)
		bound = self.spec.init_scale / numpy.sqrt(shape[0])
		return rng.uniform(-bound, bound, size=shape)

	@staticmethod
	def activate(z, activation):
		if activation == 'tanh':
			return numpy.tanh(z)
		elif activation == 'relu':
			return numpy.maximum(z, 0.0)
		elif activation == 'sigmoid':
			return 1.0 / (1.0 + numpy.exp(-z))
		return z

	@staticmethod
	def activation_derivative(z, a, activation):
		if activation == 'tanh':
			return 1.0 - a * a
		elif activation == 'relu':
			return (z > 0).astype(numpy.float64)
		elif activation == 'sigmoid':
			return a * (1.0 - a)
		return numpy.ones_like(z)

	def run_layers(self, inputs, arrays, layers, name):
		"""Forward through a stack of layers, return the list of (input, pre-activation, activation)"""
		cache = []
		activation_value = inputs
		for index, (width, activation) in enumerate(layers):
			weights, bias = arrays[2 * index], arrays[2 * index + 1]
			z = activation_value @ weights + bias
			layer_output = self.activate(z, activation)
			if not numpy.all(numpy.isfinite(layer_output)):
				raise NumericError('Non-finite activation', layer='%s.%s' % (name, index))
			cache.append((activation_value, z, layer_output))
			activation_value = layer_output
		return cache

	def backward_layers(self, delta, arrays, layers, cache):
		"""Backpropagate delta through a stack of layers, return (flat gradient, delta at the stack input)"""
		gradients = [None] * len(arrays)
		for index in reversed(range(len(layers))):
			layer_input, z, layer_output = cache[index]
			dz = delta * self.activation_derivative(z, layer_output, layers[index][1])
			gradients[2 * index] = layer_input.T @ dz
			gradients[2 * index + 1] = dz.sum(axis=0)
			delta = dz @ arrays[2 * index].T
		return flatten(gradients), delta

	def check_inputs(self, inputs):
		if inputs.ndim != 2 or inputs.shape[1] != self.spec.input_dim:
			raise ConfigurationError('Inputs have shape %s, model expects %s features' % (inputs.shape, self.spec.input_dim))

	def predict(self, params, inputs):
		inputs = numpy.asarray(inputs, dtype=numpy.float64)
		self.check_inputs(inputs)
		trunk_cache = self.run_layers(inputs, params.shared_arrays(), self.spec.trunk_layers, 'trunk')
		trunk_output = trunk_cache[-1][2] if trunk_cache else inputs
		outputs = []
		for task, layers in enumerate(self.spec.head_layers):
			head_cache = self.run_layers(trunk_output, params.task_arrays(task), layers, 'head%s' % task)
			outputs.append(head_cache[-1][2] if head_cache else trunk_output)
		return outputs

	def task_loss(self, task, outputs, labels):
		"""Return the loss of one task and its derivative with respect to the task outputs"""

		count = outputs.shape[0]
		weight = self.spec.loss_weights[task]

		if self.spec.losses[task] == 'cross_entropy':
			if not numpy.all(numpy.mod(labels, 1) == 0):
				raise ConfigurationError('Task %s uses cross entropy but has non integral labels' % task)
			labels = labels.astype(numpy.int64).ravel()
			if numpy.any(labels < 0) or numpy.any(labels >= outputs.shape[1]):
				raise ConfigurationError('Task %s labels outside of [0, %s)' % (task, outputs.shape[1]))
			shifted = outputs - outputs.max(axis=1, keepdims=True)
			exponentials = numpy.exp(shifted)
			sums = exponentials.sum(axis=1)
			# Clip rounding residue so the loss stays non-negative
			per_example = numpy.maximum(numpy.log(sums) - shifted[numpy.arange(count), labels], 0.0)
			derivative = exponentials / sums[:, None]
			derivative[numpy.arange(count), labels] -= 1.0
			return weight * per_example.mean(), derivative * (weight / count)

		labels = numpy.asarray(labels, dtype=numpy.float64).reshape(count, -1)
		if labels.shape != outputs.shape:
			raise ConfigurationError('Task %s labels have shape %s, outputs %s' % (task, labels.shape, outputs.shape))
		residual = outputs - labels
		return weight * numpy.mean(residual * residual), residual * (2.0 * weight / residual.size)

	def losses_and_gradients(self, params, batch, gradients=True):
		self.check_batch(batch)
		self.check_inputs(batch.inputs)

		shared_arrays = params.shared_arrays()
		trunk_cache = self.run_layers(batch.inputs, shared_arrays, self.spec.trunk_layers, 'trunk')
		trunk_output = trunk_cache[-1][2] if trunk_cache else batch.inputs

		losses = numpy.zeros(self.num_tasks)
		task_gradients = []

		for task, layers in enumerate(self.spec.head_layers):
			task_arrays = params.task_arrays(task)
			head_cache = self.run_layers(trunk_output, task_arrays, layers, 'head%s' % task)
			outputs = head_cache[-1][2] if head_cache else trunk_output
			losses[task], delta = self.task_loss(task, outputs, batch.labels[task])

			if gradients:
				task_gradient, delta = self.backward_layers(delta, task_arrays, layers, head_cache)
				shared_gradient, delta = self.backward_layers(delta, shared_arrays, self.spec.trunk_layers, trunk_cache)
				task_gradients.append((shared_gradient, task_gradient))

		if not numpy.all(numpy.isfinite(losses)):
			raise NumericError('Non-finite loss')

		return losses, task_gradients if gradients else None


class QuadraticModel(Model):
	"""Quadratic wells over the shared vector: L_i = mean over examples of (x - y_i)^T A_i (x - y_i)"""

	def get_layout(self):
		return ParamLayout([(self.spec.dimension,)], [[] for task in range(self.num_tasks)])

	def init_params(self, rng):
		rng = numpy.random.default_rng(rng)
		shared = rng.uniform(-self.spec.init_scale, self.spec.init_scale, size=self.spec.dimension)
		return ParamSet(shared, [numpy.zeros(0) for task in range(self.num_tasks)], self.get_layout())

	def losses_and_gradients(self, params, batch, gradients=True):
		self.check_batch(batch)

		losses = numpy.zeros(self.num_tasks)
		task_gradients = []

		for task, curvature in enumerate(self.spec.curvatures):
			centers = numpy.asarray(batch.labels[task], dtype=numpy.float64).reshape(batch.size, -1)
			if centers.shape[1] != self.spec.dimension:
				raise ConfigurationError('Task %s centers have dimension %s, model has %s' % (task, centers.shape[1], self.spec.dimension))
			weight = self.spec.loss_weights[task]
			residual = params.shared - centers
			losses[task] = weight * numpy.mean(numpy.sum((residual @ curvature) * residual, axis=1))
			if gradients:
				shared_gradient = weight * (curvature + curvature.T) @ residual.mean(axis=0)
				task_gradients.append((shared_gradient, numpy.zeros(0)))

		if not numpy.all(numpy.isfinite(losses)):
			raise NumericError('Non-finite loss')

		return losses, task_gradients if gradients else None


def build_model(spec):
	"""Return the model class instance matching the ModelSpec kind"""
	if spec.kind == 'quadratic':
		return QuadraticModel(spec)
	return DenseNetwork(spec)
