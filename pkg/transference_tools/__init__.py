from .errors import *
from .utils import *
from .net_engine import *
from .optimizers import *
from .mechanisms import *
from .transference import *
from .it_mtl import *
from .grouping import *
from .datasets import *
from .landscape import *
from .config import *
