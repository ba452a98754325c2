# This is where the django test command looks.  By importing into here
# we advertise our test cases; each lives at the bottom of the module it
# tests.

from condenser.cnerrors import CNErrorTest
from condenser.cnconf import CNConfTest
from condenser.cngeometry import CNGeometryTest
from condenser.cnkernel import CNKernelTest
from condenser.cnmeasure import CNMeasureTest
from condenser.cnqp import CNQPTest
from condenser.cnbalayage import CNBalayageTest
from condenser.cnsolver import CNSolverTest
from condenser.cnverify import CNVerifyTest
from condenser.cnexperiment import CNExperimentTest
from condenser.cnconfig import CNConfigTest
from condenser.cnoutput import CNRunWriterTest
from condenser.models import CNRunTest
from condenser.management.cncommand import CNCommandTest
