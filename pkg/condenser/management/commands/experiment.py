# manage.py experiment {short-circuit | unbounded-constraint | duality | counterexample}
#
#   short-circuit          1/c_g(K_1 u ... u K_j) over the disc exhaustion,
#                          checked against ||lambda - lambda'||^2
#   unbounded-constraint   optima under the growing constraints
#                          xi_1 + ... + xi_m with a point-source field
#   duality                theta = q (xi - lambda) against the unconstrained
#                          problem (needs --config)
#   counterexample         Green vs Riesz partial sums of sum c_k lambda_k
#
# Writes <name>.json and the manifest; exits 4 when the experiment's own
# pass criteria fail.

from condenser.cnerrors import InfeasibleSpec
from condenser.cnexperiment import (build_problem, counterexample_experiment, duality_experiment,
  short_circuit_experiment, unbounded_constraint_experiment)
from condenser.cngeometry import CNDomain
from condenser.management.cncommand import CNCommand

EXPERIMENTS = ( 'short-circuit', 'unbounded-constraint', 'duality', 'counterexample' )


class Command( CNCommand ):

  help = "Run one of the structural experiments and print its table."

  def add_command_arguments( self, parser ):
    parser.add_argument( 'experiment', choices = EXPERIMENTS )
    parser.add_argument( '--levels', type = int, help = "discs in the exhaustion / escaping sequence" )
    parser.add_argument( '--terms', type = int, default = 8, help = "counterexample terms" )
    parser.add_argument( '--nodes', type = int, help = "nodes per disc" )
    parser.add_argument( '--a2-nodes', type = int,
      help = "A2 nodes for short-circuit (sized from --plane-resolution by default)" )
    parser.add_argument( '--resolution', type = float, default = 2.0,
      help = "short-circuit disc k is sampled at spacing resolution / k" )
    parser.add_argument( '--plane-resolution', type = float, default = 1.0,
      help = "short-circuit plane spacing is plane-resolution / levels" )
    parser.add_argument( '--alpha', type = float, default = 2.0, help = "alpha for short-circuit" )
    parser.add_argument( '--target', type = float, default = 0.5, help = "per-disc Green norm (counterexample)" )
    parser.add_argument( '--variant', default = 'halfspace', choices = ( 'halfspace', 'ball' ) )
    parser.add_argument( '--beta', type = float )

  def run( self, config, options ):
    name = options['experiment']
    seed, threads, beta = self.seed( config ), self.threads( config ), options.get( 'beta' )
    cloud = None

    if ( name == 'short-circuit' ):
      report = short_circuit_experiment( levels = options.get( 'levels' ) or 6,
        nodes_per_disc = options.get( 'nodes' ) or 12, a2_nodes = options['a2_nodes'],
        domain = CNDomain.halfspace( 3, options['alpha'] ), seed = seed, beta = beta, threads = threads,
        resolution = options['resolution'], plane_resolution = options['plane_resolution'] )
      self.table( report, 'levels', ( 'inverse_capacity', 'identity', 'identity_gap' ) )
    elif ( name == 'unbounded-constraint' ):
      report = unbounded_constraint_experiment( levels = options.get( 'levels' ) or 5,
        nodes_per_disc = options.get( 'nodes' ) or 30, seed = seed, beta = beta, threads = threads )
      self.table( report, 'levels', ( 'optima', 'piece_values' ) )
    elif ( name == 'counterexample' ):
      report = counterexample_experiment( terms = options['terms'], nodes_per_disc = options.get( 'nodes' ) or 40,
        target = options['target'], variant = options['variant'], seed = seed, beta = beta, threads = threads )
      columns = [ 'c', 'epsilon', 'green_partial_sums', 'riesz_partial_sums' ]
      if ( options['variant'] == 'ball' ):
        columns += [ 'ball_green_partial_sums', 'ball_riesz_partial_sums' ]
      self.table( report, 'terms', columns )
    else:
      if ( config is None ):
        raise InfeasibleSpec( "the duality experiment solves a run config's problem; pass --config" )
      problem = build_problem( config )
      if ( problem.green is None ):
        raise InfeasibleSpec( "the duality experiment needs a Green kernel" )
      report = duality_experiment( problem, tolerance = config.solver.get( 'tolerance' ),
        threshold = config.solver.get( 'threshold' ) )
      cloud = problem.cloud
      for key in ( 'q', 'eta', 'objective', 'unconstrained_objective', 'objective_gap', 'maxviol_Wsc1', 'maxviol_Wsc2' ):
        self.say( "  {:<24} {:.8g}".format( key, report[key] ) )

    writer = self.writer( config, name )
    writer.write_json( '{}.json'.format( name ), report )
    writer.write_manifest( self.command_name, config, cloud, seed = seed,
      extra = { 'experiment': name, 'passed': report['passed'] } )
    self.say( "{}: {}".format( name, "pass" if report['passed'] else "FAIL" ), report['passed'] )
    return self.verdict( report['passed'] ), report['passed'], report

  def table( self, report, index, columns ):
    self.say( "  ".join( [ "{:>6}".format( index ) ] + [ "{:>22}".format( c ) for c in columns ] ) )
    for row, key in enumerate( report[index] ):
      cells = [ "{:>22.10g}".format( float( report[c][row] ) ) for c in columns ]
      self.say( "  ".join( [ "{:>6}".format( key ) ] + cells ) )
