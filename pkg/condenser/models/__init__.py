# django, when started, imports the app's 'models' module to find the
# models.  Ours is a directory, so it is up to this file to import every
# model (== SQL table) from the files next to it.

from condenser.models.cnrun import CNRun

from condenser.models.cnrun import CNRunTest
