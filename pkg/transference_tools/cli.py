"""Command line front end: generate datasets, train and measure, recommend task groupings, probe loss landscapes and report"""
import os
import sys
import argparse
import logging
from pprint import pformat
import numpy
from astropy.table import Table

from .errors import ConfigurationError, NumericError, SolverMismatchError, TriggerError
from .utils import write_table, read_table, write_json, read_json, spawn_seeds, content_hash
from .config import RunConfig, load_dataset_spec, get_output_root, read_text
from .datasets import generate
from .mechanisms import CombinedCandidate, single_task_candidates
from .it_mtl import Trainer
from .transference import TransferenceMatrix, normalize, total_transference, SOURCE_COLUMN
from .grouping import SOLVERS, GroupingPlan
from .landscape import probe_1d, probe_2d
from .net_engine import load_checkpoint

__all__ = ['main', 'get_parser', 'parse_trigger', 'EXIT_CODES']

EXIT_CODES = {
	'success': 0,
	'failure': 1,
	'configuration': 2,
	'numeric': 3,
	'solver_mismatch': 4,
}

# Files of a run directory
CONFIG_FILE = 'config.yaml'
PARAMS_FILE = 'params.bin'
STEP_LOG_FILE = 'step_log.csv'
LOSSES_FILE = 'losses.csv'
TRANSFERENCE_FILE = 'transference.csv'
EPOCH_TRANSFERENCE_FILE = 'transference_epochs.csv'
SUMMARY_FILE = 'summary.json'


def task_names(num_tasks):
	return ['task_%s' % task for task in range(num_tasks)]


def cmd_gen(args):
	"""Generate a dataset from a spec file into a .mtds container"""
	spec = load_dataset_spec(args.spec_file)
	dataset = generate(spec)
	dataset.save(args.output, content_hash(spec.to_dict()))
	return EXIT_CODES['success']


def build_run(config):
	"""Return the dataset, model, initial parameters and trainer of a run configuration, seeded like the run"""

	dataset = config.build_dataset()
	model = config.build_model(dataset)
	if dataset.num_tasks != model.num_tasks:
		raise ConfigurationError('Dataset has %s tasks, model has %s' % (dataset.num_tasks, model.num_tasks))

	init_seed, candidate_seed, data_seed = spawn_seeds(config.seed)
	params = model.init_params(numpy.random.default_rng(init_seed))
	trainer = Trainer(
		model,
		config.build_optimizer(),
		config.build_candidates(model.num_tasks),
		config.mode,
		config.record_transference,
		candidate_seed,
		data_seed,
	)
	return dataset, model, params, trainer


def step_log_table(step_logs):
	"""One row per step and candidate: epoch, step, candidate, total transference, chosen"""
	rows = [(log.epoch,) + row for log in step_logs for row in log.to_rows()]
	table = Table()
	table['epoch'] = numpy.array([row[0] for row in rows], dtype=int)
	table['step'] = numpy.array([row[1] for row in rows], dtype=int)
	table['candidate'] = numpy.array([row[2] for row in rows], dtype=str)
	table['total_transference'] = numpy.array([row[3] for row in rows], dtype=float)
	table['chosen'] = numpy.array([row[4] for row in rows], dtype=int)
	return table


def losses_table(epoch_metrics, names):
	table = Table()
	table['epoch'] = numpy.array([metrics['epoch'] for metrics in epoch_metrics], dtype=int)
	table['learning_rate'] = numpy.array([metrics['learning_rate'] for metrics in epoch_metrics], dtype=float)
	for key in ('train_loss', 'valid_loss', 'valid_accuracy'):
		for task, name in enumerate(names):
			table['%s_%s' % (key, name)] = numpy.array(
				[metrics[key][task] if key in metrics else numpy.nan for metrics in epoch_metrics], dtype=float
			)
	return table


def epoch_transference_table(epoch_matrices):
	"""Long form table of the per-epoch matrices: epoch, source, target, value"""
	rows = [
		(epoch, source_name, target_name, matrix.values[source, target])
		for epoch, matrix in enumerate(epoch_matrices)
		for source, source_name in enumerate(matrix.task_names)
		for target, target_name in enumerate(matrix.task_names)
	]
	table = Table()
	table['epoch'] = numpy.array([row[0] for row in rows], dtype=int)
	table['source'] = numpy.array([row[1] for row in rows], dtype=str)
	table['target'] = numpy.array([row[2] for row in rows], dtype=str)
	table['value'] = numpy.array([row[3] for row in rows], dtype=float)
	return table


def cmd_train(args):
	"""Run a training configuration and write its artifacts into the run directory"""

	config = RunConfig.load(args.config)
	directory = args.output or config.get_output_directory()
	config_hash = config.config_hash
	logging.debug('Configuration %s', pformat(config.data))

	# The configuration is copied before anything else runs
	os.makedirs(directory, exist_ok=True)
	config.save(os.path.join(directory, CONFIG_FILE))

	dataset, model, params, trainer = build_run(config)
	names = task_names(model.num_tasks)

	summary = {
		'config_hash': config_hash,
		'config_directory': config.base_directory,
		'mode': config.mode,
		'seed': config.seed,
		'epochs': config.epochs,
		'batch_size': config.batch_size,
		'steps_per_epoch': dataset.steps_per_epoch(config.batch_size),
		'candidates': trainer.candidate_ids,
		'task_names': names,
		'dataset': dataset.spec.to_dict(),
	}

	try:
		artifacts = trainer.train(params, dataset, config.epochs, config.batch_size)
	except NumericError as error:
		step = len(trainer.step_logs)
		summary.update({'status': 'aborted', 'step': step, 'error': str(error)})
		write_json(os.path.join(directory, SUMMARY_FILE), summary)
		logging.critical('Training aborted at step %s: %s', step, error)
		raise

	params.save(os.path.join(directory, PARAMS_FILE), {'config_hash': config_hash, 'steps': len(artifacts.step_logs)})
	write_table(step_log_table(artifacts.step_logs), os.path.join(directory, STEP_LOG_FILE), config_hash)
	write_table(losses_table(artifacts.epoch_metrics, names), os.path.join(directory, LOSSES_FILE), config_hash)

	transference = artifacts.transference(names)
	if transference is not None:
		epoch_matrices, run_matrix = transference
		metadata = {'seed': config.seed, 'learning_rate': config.optimizer_spec.learning_rate, 'mode': config.mode}
		run_matrix.write_csv(os.path.join(directory, TRANSFERENCE_FILE), config_hash, metadata)
		write_table(epoch_transference_table(epoch_matrices), os.path.join(directory, EPOCH_TRANSFERENCE_FILE), config_hash)
		logging.info('Run transference matrix:\n%s', '\n'.join(run_matrix.to_table().pformat(max_width=-1)))

	summary.update(
		{
			'status': 'completed',
			'steps': len(artifacts.step_logs),
			'choices': dict(artifacts.choice_histogram()),
			'epoch_choices': [metrics['choices'] for metrics in artifacts.epoch_metrics],
			'final_train_loss': artifacts.epoch_metrics[-1]['train_loss'] if artifacts.epoch_metrics else None,
		}
	)
	if dataset.num_examples('test'):
		summary['test_loss'], summary['test_accuracy'] = model.evaluate(params, *dataset.get_split('test'))

	write_json(os.path.join(directory, SUMMARY_FILE), summary)
	logging.info('Wrote run artifacts to "%s"', directory)
	return EXIT_CODES['success']


def cmd_group(args):
	"""Normalize a transference matrix and write the best grouping plan under the budget"""

	matrix = TransferenceMatrix.read_csv(args.matrix)
	if args.budget < 1:
		raise ConfigurationError('The budget must be at least 1, got %s' % args.budget)

	normalized = normalize(matrix)
	plan = SOLVERS[args.solver](normalized, args.budget)

	output = args.output or os.path.join(os.path.dirname(os.path.abspath(args.matrix)), 'plan_k%s.json' % args.budget)
	plan.write(output, matrix.config_hash)
	logging.info('Grouping plan with budget %s:\n%s', args.budget, plan.format_table())
	return EXIT_CODES['success']


class Trigger:
	"""Condition checked before every step of a replay; the probes run on the first step it fires"""

	def __init__(self, text):
		self.text = text
		self.steps_scanned = 0

	def fires(self, model, params, batch, optimizer, step, epoch):
		raise NotImplementedError()

	def get_summary(self):
		return {'trigger': self.text, 'steps_scanned': self.steps_scanned}


class StepTrigger(Trigger):
	def __init__(self, text, step):
		super().__init__(text)
		self.step = step

	def fires(self, model, params, batch, optimizer, step, epoch):
		return step == self.step


class EpochTrigger(Trigger):
	def __init__(self, text, epoch):
		super().__init__(text)
		self.epoch = epoch

	def fires(self, model, params, batch, optimizer, step, epoch):
		return epoch == self.epoch


class SingleBeatsCombinedTrigger(Trigger):
	"""Fires on the first step where a single task gradient has a higher total transference than the combined gradient"""

	def __init__(self, text):
		super().__init__(text)
		self.best_margin = -numpy.inf

	def fires(self, model, params, batch, optimizer, step, epoch):
		baseline, gradients = model.losses_and_gradients(params, batch)
		shared_gradients = [shared_gradient for shared_gradient, task_gradient in gradients]
		candidates = single_task_candidates(model.num_tasks) + [CombinedCandidate()]
		totals = total_transference(model, params, batch, optimizer, candidates, shared_gradients, baseline=baseline)
		margin = float(numpy.max(totals[:-1]) - totals[-1])
		self.best_margin = max(self.best_margin, margin)
		return margin > 0

	def get_summary(self):
		summary = super().get_summary()
		summary['best_margin'] = self.best_margin
		return summary


class FinalTrigger(Trigger):
	"""Probes the parameters stored at the end of the run instead of replaying it"""

	def fires(self, model, params, batch, optimizer, step, epoch):
		return False

	def get_summary(self):
		summary = super().get_summary()
		summary['checkpoint'] = PARAMS_FILE
		return summary


def parse_trigger(text):
	"""Return the trigger for step=N, epoch=N, single-beats-combined or final"""
	text = text.strip()
	if text == 'single-beats-combined':
		return SingleBeatsCombinedTrigger(text)
	if text == 'final':
		return FinalTrigger(text)
	name, separator, value = text.partition('=')
	if separator and name in ('step', 'epoch'):
		try:
			value = int(value)
		except ValueError as error:
			raise ConfigurationError('Invalid trigger "%s", the %s must be an integer' % (text, name)) from error
		return StepTrigger(text, value) if name == 'step' else EpochTrigger(text, value)
	raise ConfigurationError('Unknown trigger "%s", must be step=N, epoch=N, single-beats-combined or final' % text)


def file_name(candidate_id):
	return candidate_id.replace(':', '_').replace(',', '-')


def load_final_state(run_directory, summary, config, dataset, model, optimizer):
	"""Return the stored final parameters of a completed run and the first training batch

	The optimizer gets the learning rate of the last epoch; its momentum is not stored and starts at zero.
	"""

	if summary.get('status') != 'completed':
		raise ConfigurationError('Run "%s" did not complete, it has no final parameters' % run_directory)

	try:
		params = load_checkpoint(os.path.join(run_directory, PARAMS_FILE))
	except (OSError, RuntimeError, ValueError) as error:
		raise ConfigurationError('Could not read the parameters of run "%s": %s' % (run_directory, error)) from error

	if params.layout != model.get_layout():
		raise ConfigurationError('Parameters of run "%s" do not match the model of its configuration' % run_directory)

	if optimizer.halve_every:
		for epoch in range(1, config.epochs):
			if epoch % optimizer.halve_every == 0:
				optimizer.halve_learning_rate()

	batch = next(dataset.iter_batches('train', config.batch_size))
	return params, batch


def cmd_landscape(args):
	"""Replay a run up to its trigger step, or load its final parameters, and probe the loss landscape there"""

	summary = read_json(os.path.join(args.run_directory, SUMMARY_FILE))
	config_path = os.path.join(args.run_directory, CONFIG_FILE)
	config = RunConfig.from_text(read_text(config_path), config_path, summary.get('config_directory', args.run_directory))
	if config.config_hash != summary.get('config_hash'):
		raise ConfigurationError('Configuration of run "%s" does not match its summary hash' % args.run_directory)

	dataset, model, params, trainer = build_run(config)
	trigger = parse_trigger(args.trigger)
	names = task_names(model.num_tasks)
	output = args.output or os.path.join(args.run_directory, 'landscape')

	if isinstance(trigger, FinalTrigger):
		params, batch = load_final_state(args.run_directory, summary, config, dataset, model, trainer.optimizer)
		step, epoch = summary['steps'], config.epochs - 1
	else:
		for step, epoch, batch in trainer.replay(params, dataset, config.epochs, config.batch_size):
			trigger.steps_scanned += 1
			if trigger.fires(model, params, batch, trainer.optimizer, step, epoch):
				break
		else:
			raise TriggerError('Trigger "%s" never fired: %s' % (args.trigger, pformat(trigger.get_summary())), trigger.get_summary())

	logging.info('Trigger "%s" fired at step %s (epoch %s)', args.trigger, step, epoch)

	if args.kind in ('1d', 'both'):
		baseline, gradients = model.losses_and_gradients(params, batch)
		shared_gradients = [shared_gradient for shared_gradient, task_gradient in gradients]
		candidates = single_task_candidates(model.num_tasks) + [CombinedCandidate()]
		candidates += [candidate for candidate in trainer.candidates if candidate.id not in {known.id for known in candidates}]
		rng = numpy.random.default_rng(config.seed)
		for candidate in candidates:
			grid = probe_1d(model, params, batch, trainer.optimizer, candidate.produce(shared_gradients, rng), args.samples, args.extent)
			grid.metadata.update({'candidate': candidate.id, 'step': step, 'epoch': epoch, 'trigger': args.trigger})
			grid.write(os.path.join(output, 'landscape_1d_%s.csv' % file_name(candidate.id)), names, config.config_hash)

	if args.kind in ('2d', 'both'):
		grid = probe_2d(model, params, batch, numpy.random.default_rng(config.seed), args.grid, args.radius)
		grid.metadata.update({'step': step, 'epoch': epoch, 'trigger': args.trigger})
		grid.write(os.path.join(output, 'landscape_2d.csv'), names, config.config_hash)

	logging.info('Wrote landscape probes to "%s"', output)
	return EXIT_CODES['success']


def checkpoint_table(file_path):
	"""One row per parameter block of a checkpoint: block, size, norm"""
	params = load_checkpoint(file_path)
	blocks = [('shared', params.shared)] + [('task_%s' % task, vector) for task, vector in enumerate(params.task_specific)]
	table = Table()
	table['block'] = numpy.array([name for name, vector in blocks], dtype=str)
	table['size'] = numpy.array([vector.size for name, vector in blocks], dtype=int)
	table['norm'] = numpy.array([numpy.linalg.norm(vector) for name, vector in blocks], dtype=float)
	return table


def report_file(file_path):
	"""Return the text rendering of a matrix or table CSV, a plan or a summary JSON, or a parameter checkpoint"""

	if file_path.endswith('.bin'):
		return '\n'.join(checkpoint_table(file_path).pformat(max_lines=-1, max_width=-1))

	if file_path.endswith('.json'):
		data = read_json(file_path)
		if 'groups' in data and 'serving' in data:
			return GroupingPlan.from_dict(data).format_table()
		return pformat(data)

	table = read_table(file_path)
	lines = table.pformat(max_lines=-1, max_width=-1)
	try:
		matrix = TransferenceMatrix.read_csv(file_path)
	except ConfigurationError:
		return '\n'.join(lines)

	normalized = normalize(matrix)
	normalized_table = Table()
	normalized_table[SOURCE_COLUMN] = normalized.task_names
	for task, name in enumerate(normalized.task_names):
		normalized_table[name] = normalized.values[:, task]
	return '\n'.join(lines + ['', 'normalized:'] + normalized_table.pformat(max_lines=-1, max_width=-1))


def cmd_report(args):
	"""Print aligned text tables of matrices, plans, run tables and summaries"""

	paths = []
	for path in args.paths:
		if os.path.isdir(path):
			paths.extend(
				os.path.join(path, name)
				for name in (SUMMARY_FILE, TRANSFERENCE_FILE, LOSSES_FILE, PARAMS_FILE)
				if os.path.exists(os.path.join(path, name))
			)
			paths.extend(os.path.join(path, name) for name in sorted(os.listdir(path)) if name.startswith('plan_') and name.endswith('.json'))
		else:
			paths.append(path)

	for path in paths:
		print('== %s' % path)
		print(report_file(path))
		print()

	return EXIT_CODES['success']


def get_parser():
	parser = argparse.ArgumentParser(description='Measure inter-task transference, train with IT-MTL and recommend task groupings')
	parser.add_argument(
		'--verbose',
		'-v',
		choices=['DEBUG', 'INFO', 'ERROR'],
		default='INFO',
		help='Set the logging level (default is INFO)',
	)
	subparsers = parser.add_subparsers(dest='command', required=True)

	gen_parser = subparsers.add_parser('gen', help='Generate a synthetic dataset')
	gen_parser.add_argument('spec_file', metavar='SPEC FILE', help='A YAML file with the dataset spec')
	gen_parser.add_argument('output', metavar='OUTPUT', help='The .mtds file to write')
	gen_parser.set_defaults(function=cmd_gen)

	train_parser = subparsers.add_parser('train', help='Run a training configuration')
	train_parser.add_argument('config', metavar='CONFIG', help='A YAML run configuration')
	train_parser.add_argument(
		'--output', '-o', default=None, help='The run directory (default from the configuration and $TRANSFERENCE_OUTPUT_ROOT)'
	)
	train_parser.set_defaults(function=cmd_train)

	group_parser = subparsers.add_parser('group', help='Recommend task groupings from a transference matrix')
	group_parser.add_argument('matrix', metavar='MATRIX CSV', help='A transference matrix written by train')
	group_parser.add_argument('--budget', '-k', type=int, required=True, help='The maximum number of groups')
	group_parser.add_argument('--solver', '-s', choices=sorted(SOLVERS), default='branch-and-bound', help='The solver to use, both cross checks them')
	group_parser.add_argument('--output', '-o', default=None, help='The plan JSON file (default next to the matrix)')
	group_parser.set_defaults(function=cmd_group)

	landscape_parser = subparsers.add_parser('landscape', help='Replay a run to a trigger and probe the loss landscape')
	landscape_parser.add_argument('run_directory', metavar='RUN DIRECTORY', help='A directory written by train')
	landscape_parser.add_argument('--trigger', '-t', default='step=0', help='step=N, epoch=N, single-beats-combined or final (default step=0)')
	landscape_parser.add_argument('--kind', choices=['1d', '2d', 'both'], default='both', help='The probes to run')
	landscape_parser.add_argument('--samples', type=int, default=31, help='Number of samples along each 1-D line')
	landscape_parser.add_argument('--extent', type=float, default=3.0, help='Largest step multiple sampled along each 1-D line')
	landscape_parser.add_argument('--grid', type=int, default=21, help='Number of samples along each axis of the 2-D grid')
	landscape_parser.add_argument('--radius', type=float, default=0.1, help='Extent of the 2-D grid relative to the parameter norm')
	landscape_parser.add_argument('--output', '-o', default=None, help='The output directory (default RUN DIRECTORY/landscape)')
	landscape_parser.set_defaults(function=cmd_landscape)

	report_parser = subparsers.add_parser('report', help='Render matrices, plans and run directories as text tables')
	report_parser.add_argument('paths', metavar='PATH', nargs='+', help='A CSV, plan JSON or run directory')
	report_parser.set_defaults(function=cmd_report)

	return parser


def main(argv=None):
	"""Run a command and return its exit code"""

	args = get_parser().parse_args(argv)

	logging.basicConfig(
		level=getattr(logging, args.verbose),
		format='%(asctime)s %(levelname)-8s: %(message)s',
	)
	logging.debug('Output root is "%s"', get_output_root())

	try:
		return args.function(args)
	except TriggerError as error:
		logging.critical('%s', error)
		return EXIT_CODES['failure']
	except SolverMismatchError as error:
		logging.critical('%s', error)
		return EXIT_CODES['solver_mismatch']
	except ConfigurationError as error:
		logging.critical('Invalid configuration: %s', error)
		return EXIT_CODES['configuration']
	except NumericError as error:
		logging.critical('Numeric failure: %s', error)
		return EXIT_CODES['numeric']
	except Exception as error:
		logging.critical('Command %s failed: %s', args.command, error)
		return EXIT_CODES['failure']


if __name__ == '__main__':
	sys.exit(main())
