# manage.py capacity --shape disc --radius 1 --nodes 2000
#
# Discrete capacity (1 / minimal energy over probability measures) of a
# disc on the boundary of the half-space, a ball, or the disc stack
# K_k = {x1 = 1/k, |x'| <= k}.  For the Newtonian disc the report carries
# the continuum value 2r/pi and the 2r/pi^2 normalization next to it.

from condenser.cnerrors import EXIT_OK
from condenser.cnexperiment import DISC_REFERENCES, capacity_experiment
from condenser.management.cncommand import CNCommand


class Command( CNCommand ):

  help = "Discrete capacity of a disc, a ball or a disc stack."

  def add_command_arguments( self, parser ):
    parser.add_argument( '--shape', default = 'disc', choices = ( 'disc', 'ball', 'disc-stack' ) )
    parser.add_argument( '--radius', type = float, default = 1.0 )
    parser.add_argument( '--nodes', type = int, default = 2000 )
    parser.add_argument( '--kernel', default = 'riesz', choices = ( 'riesz', 'green' ) )
    parser.add_argument( '--alpha', type = float, default = 2.0 )
    parser.add_argument( '--dimension', type = int, default = 3 )
    parser.add_argument( '--levels', type = int, default = 3, help = "discs in the disc stack" )
    parser.add_argument( '--offset', type = float, help = "distance of the disc from the boundary (default: its radius)" )
    parser.add_argument( '--beta', type = float )
    parser.add_argument( '--reference', choices = sorted( DISC_REFERENCES ), default = 'continuum',
      help = "disc value the relative error is taken against (continuum: 2r/pi; quoted: 2r/pi^2)" )

  def run( self, config, options ):
    report, measure = capacity_experiment( shape = options['shape'], radius = options['radius'],
      nodes = options['nodes'], kernel = options['kernel'], alpha = options['alpha'],
      dimension = options['dimension'], levels = options['levels'], offset = options.get( 'offset' ),
      seed = self.seed( config ), beta = options.get( 'beta' ), threads = self.threads( config ),
      reference = options.get( 'reference' ) )
    writer = self.writer( config, 'capacity-{}'.format( options['shape'] ) )
    writer.write_measure( 'equilibrium.csv', measure )
    writer.write_json( 'capacity.json', report )
    writer.write_manifest( self.command_name, config, measure.cloud, seed = self.seed( config ),
      extra = { 'arguments': { k: options.get( k ) for k in ( 'shape', 'radius', 'nodes', 'kernel', 'alpha',
        'dimension', 'levels', 'offset', 'beta', 'reference' ) } } )

    self.say( "capacity {:.6f}  ({} kernel, {} nodes, beta {})".format( report['capacity'], report['kernel'],
      report['nodes'], report['beta'] ) )
    for name, value in sorted( report.get( 'reference', {} ).items() ):
      error = report.get( 'relative_errors', {} ).get( name )
      self.say( "  {:<30} {:.6f}{}".format( name, value, "" if error is None else "  (off by {:.2%})".format( error ) ) )
    return EXIT_OK, None, report
