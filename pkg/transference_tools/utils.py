import os
import logging
import hashlib
import tempfile
from contextlib import contextmanager
import numpy
import simplejson as json
from astropy.table import Table
from astropy.io import ascii


__all__ = [
	'atomic_path',
	'atomic_write',
	'ArrayEncoder',
	'dumps_json',
	'write_json',
	'read_json',
	'content_hash',
	'write_table',
	'read_table',
	'spawn_seeds',
	'table_config_hash',
	'FLOAT_FORMAT',
]

# 17 significant digits round-trips any float64
FLOAT_FORMAT = '.17g'


@contextmanager
def atomic_path(path):
	"""Yield a temporary path next to path, and move it to path if the block succeeds"""

	directory = os.path.dirname(os.path.abspath(path))
	os.makedirs(directory, exist_ok=True)
	file_descriptor, temporary_path = tempfile.mkstemp(dir=directory, prefix='.%s.' % os.path.basename(path))
	os.close(file_descriptor)

	try:
		yield temporary_path
	except BaseException:
		if os.path.exists(temporary_path):
			os.remove(temporary_path)
		raise
	else:
		os.replace(temporary_path, path)
		logging.debug('Wrote file "%s"', path)


@contextmanager
def atomic_write(path, mode='w'):
	"""Open a file for writing that only replaces path once it is closed successfully"""
	with atomic_path(path) as temporary_path:
		with open(temporary_path, mode) as file:
			yield file


class ArrayEncoder(json.JSONEncoder):
	"""Encode numpy scalars and arrays, tuples and sets into plain JSON values"""

	def default(self, o):
		if isinstance(o, numpy.integer):
			return int(o)
		elif isinstance(o, numpy.floating):
			return float(o)
		elif isinstance(o, numpy.bool_):
			return bool(o)
		elif isinstance(o, numpy.ndarray):
			return o.tolist()
		elif isinstance(o, (set, frozenset)):
			return sorted(o)

		return super().default(o)


def dumps_json(data):
	"""Serialize data into a reproducible JSON document (NaN become null)"""
	return json.dumps(data, ignore_nan=True, cls=ArrayEncoder, sort_keys=True, indent=2) + '\n'


def write_json(path, data):
	"""Atomically write data as a JSON document"""
	with atomic_write(path) as file:
		file.write(dumps_json(data))


def read_json(path):
	"""Read a JSON document"""
	try:
		with open(path, 'r') as file:
			return json.load(file)
	except Exception as error:
		raise RuntimeError('Could not read JSON file "%s": %s' % (path, error)) from error


def content_hash(data):
	"""Return the SHA-256 of the canonical JSON dump of data"""
	canonical = json.dumps(data, ignore_nan=True, cls=ArrayEncoder, sort_keys=True, separators=(',', ':'))
	return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def write_table(table, path, config_hash=None):
	"""Atomically write an astropy table as comma separated values, floats with 17 significant digits"""

	table = Table(table, copy=False)
	table.meta['comments'] = ['config_hash: %s' % config_hash] if config_hash else []

	for column in table.itercols():
		if column.dtype.kind == 'f':
			column.info.format = FLOAT_FORMAT

	with atomic_path(path) as temporary_path:
		table.write(temporary_path, format='ascii.basic', delimiter=',', overwrite=True)


def read_table(path):
	"""Read a table written by write_table"""
	try:
		return ascii.read(path, format='basic', delimiter=',')
	except Exception as error:
		raise RuntimeError('Could not read table file "%s": %s' % (path, error)) from error


def spawn_seeds(seed):
	"""Return the independent seed sequences (initialization, candidates, data order) of a run seed"""
	return numpy.random.SeedSequence(seed).spawn(3)


def table_config_hash(table):
	"""Return the config hash of the comment line of a table read by read_table, or None"""
	for comment in table.meta.get('comments', []):
		if comment.startswith('config_hash:'):
			return comment.split(':', 1)[1].strip()
	return None
