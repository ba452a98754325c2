# manage.py calibrate_beta [--target C | --reference quoted] [--radius r] [--nodes N]
#
# Finds the diagonal factor beta for which the discrete Newtonian capacity
# of a disc of radius r equals the target (2r/pi by default, 2r/pi^2 with
# --reference quoted).  Put the result in settings.CONDENSER['BETA'] or a
# run config's solver.beta.

from condenser.cnerrors import EXIT_OK
from condenser.cnexperiment import DISC_REFERENCES, calibrate_beta
from condenser.management.cncommand import CNCommand


class Command( CNCommand ):

  help = "Calibrate the diagonal rule's beta against a disc capacity."

  def add_command_arguments( self, parser ):
    parser.add_argument( '--target', type = float, help = "capacity to hit (default: the --reference value)" )
    parser.add_argument( '--reference', choices = sorted( DISC_REFERENCES ), default = 'continuum',
      help = "continuum: 2r/pi; quoted: 2r/pi^2" )
    parser.add_argument( '--radius', type = float, default = 1.0 )
    parser.add_argument( '--nodes', type = int, default = 2000 )
    parser.add_argument( '--low', type = float, help = "lower end of the starting beta bracket" )
    parser.add_argument( '--high', type = float, help = "upper end of the starting beta bracket" )

  def run( self, config, options ):
    report = calibrate_beta( target = options.get( 'target' ), radius = options['radius'], nodes = options['nodes'],
      seed = self.seed( config ), low = options.get( 'low' ), high = options.get( 'high' ),
      threads = self.threads( config ), reference = options['reference'] )
    writer = self.writer( config )
    writer.write_json( 'calibration.json', report )
    writer.write_manifest( self.command_name, config, seed = self.seed( config ) )
    self.say( "beta = {:.8f}  (capacity {:.8f}, target {:.8f}, {} evaluations)".format( report['beta'],
      report['capacity'], report['target'], report['evaluations'] ) )
    return EXIT_OK, None, report
