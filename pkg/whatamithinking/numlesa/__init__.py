from ._common import *
from ._pointers import *
from ._struct import *
from ._constraints import *
from ._issues import *
from ._errors import *
from ._codec import *
from ._numtok import *
from ._corpus import *
from ._numerics import *
from ._model import *
from ._loss import *
from ._batch import *
from ._config import *
from ._eval import *
from ._train import *
from ._cli import *


__version__ = "0.1.0"
