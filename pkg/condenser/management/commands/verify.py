# manage.py verify --config run.toml [--probes N] [--threshold T]
#
# Solves the run config's problem on both paths (bridge and direct signed
# QP) when it has an A2 plate, compares them, and runs every diagnostic
# that applies.  Writes diagnostics.json and the manifest; exits 4 when any
# check fails.

import logging

import numpy as np

from condenser import cnconf
from condenser.cnexperiment import build_problem
from condenser.cnsolver import AGREEMENT, solve_riesz_direct, solve_riesz_via_bridge
from condenser.cnverify import finish, relative, verify_all
from condenser.management.cncommand import CNCommand
from condenser.management.commands.solve import solve

logger = logging.getLogger( __name__ )


# the bridge and the direct solve minimize the same discrete problem
def path_agreement( bridge, direct, threshold = AGREEMENT ):
  plus_gap = float( np.abs( bridge.lam.plus.weights - direct.lam.plus.weights ).sum() )
  minus_gap = float( np.abs( bridge.lam.minus.weights - direct.lam.minus.weights ).sum() )
  report = {
    'bridge_objective': bridge.objective_alpha,
    'direct_objective': direct.objective_alpha,
    'objective_gap': relative( abs( bridge.objective_alpha - direct.objective_alpha ), direct.objective_alpha ),
    'plus_l1_gap': plus_gap,
    'minus_l1_gap': minus_gap,
    'threshold': threshold,
  }
  return finish( 'agreement', report, { 'objective_gap': report['objective_gap'] <= threshold } )


class Command( CNCommand ):

  help = "Solve a run config's problem both ways and run all diagnostics; exit 4 if any fails."
  needs_config = True

  def add_command_arguments( self, parser ):
    parser.add_argument( '--probes', type = int, help = "probe points for the zone diagnostics" )
    parser.add_argument( '--threshold', type = float, help = "relative violation threshold" )

  def run( self, config, options ):
    solver = config.solver
    tolerance = solver.get( 'tolerance' )
    threshold = cnconf.setting( 'DIAGNOSTIC_THRESHOLD', options.get( 'threshold' ) or solver.get( 'threshold' ) )
    probes = options.get( 'probes' ) or solver.get( 'probes' ) or 1000
    problem = build_problem( config )
    self.say( "{}".format( problem ) )

    if ( problem.riesz is None ):
      solution = solve( problem, 'green', tolerance )
      reports = verify_all( solution, probes = probes, seed = config.seed, threshold = threshold )
    else:
      bridge = solve_riesz_via_bridge( problem, tolerance = tolerance )
      direct = solve_riesz_direct( problem, tolerance = tolerance )
      solution = direct if solver['method'] == 'direct' else bridge
      reports = verify_all( solution, probes = probes, seed = config.seed, threshold = threshold )
      reports['agreement'] = path_agreement( bridge, direct, max( threshold, AGREEMENT ) )
      reports['passed'] = reports['passed'] and reports['agreement']['passed']

    writer = self.writer( config )
    writer.write_config( config )
    writer.write_diagnostics( { 'problem': problem.describe(), 'solution': solution.describe(), 'reports': reports } )
    writer.write_manifest( self.command_name, config, problem.cloud )
    for name, report in sorted( reports.items() ):
      if ( isinstance( report, dict ) ):
        self.say( "  {:<10} {}".format( name, "pass" if report['passed'] else "FAIL" ), report['passed'] )
    return self.verdict( reports['passed'] ), reports['passed'], { 'reports': reports }
