# manage.py solve --config run.toml
#
# Builds the problem a run config describes, solves it (the bridge path
# by default, the direct signed QP with solver.method = "direct"), runs
# the diagnostics that apply and writes the run directory.  Exits 4 when
# a diagnostic threshold fails.

import logging

from condenser.cnexperiment import build_problem
from condenser.cnmeasure import CNMeasure, CNSignedMeasure
from condenser.cnsolver import CNSolution, solve_green_constrained, solve_riesz_direct, solve_riesz_via_bridge
from condenser.cnverify import verify_all
from condenser.management.cncommand import CNCommand

logger = logging.getLogger( __name__ )


def solve( problem, method, tolerance = None ):
  if ( problem.riesz is None ):
    # no A2 plate: only the Green problem is posed
    plus = solve_green_constrained( problem, tolerance = tolerance )
    solution = CNSolution( problem, CNSignedMeasure( plus, CNMeasure.zero( problem.cloud ) ), plus,
      objective_green = plus.meta['objective'], meta = { 'path': 'green' } )
    solution.traces['green'] = plus.meta['trace']
    return solution
  if ( method == 'direct' ):
    return solve_riesz_direct( problem, tolerance = tolerance )
  return solve_riesz_via_bridge( problem, tolerance = tolerance )


class Command( CNCommand ):

  help = "Solve the constrained condenser problem of a run config and check its optimality conditions."
  needs_config = True

  def run( self, config, options ):
    solver = config.solver
    problem = build_problem( config )
    self.say( "{}".format( problem ) )
    solution = solve( problem, solver['method'], solver.get( 'tolerance' ) )
    reports = verify_all( solution, probes = solver.get( 'probes' ) or 1000, seed = config.seed,
      threshold = solver.get( 'threshold' ) )
    manifest = self.writer( config ).write_run( self.command_name, solution, reports, config )
    self.report( solution, reports, config.directory )
    summary = { 'solution': solution.describe(), 'reports': reports, 'files': manifest['files'] }
    return self.verdict( reports['passed'] ), reports['passed'], summary

  def report( self, solution, reports, directory ):
    self.say( "G_alpha = {}   G_g = {}   c = {}".format( solution.objective_alpha, solution.objective_green,
      solution.frostman_c ) )
    for name, report in sorted( reports.items() ):
      if ( isinstance( report, dict ) ):
        self.say( "  {:<10} {}".format( name, "pass" if report['passed'] else "FAIL" ), report['passed'] )
    self.say( "results in {}".format( directory ), reports['passed'] )
