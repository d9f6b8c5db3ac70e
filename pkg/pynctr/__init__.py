# flake8: noqa
# include functions for easy reference from nc prefix
from pynctr.nc_utils import *
from pynctr.numfield import *
from pynctr.bethe import *
from pynctr.kernel import *
from pynctr.correlators import *
from pynctr.energies import *
from pynctr.nc_io import *
from pynctr.verify import *
from pynctr.cli import *
