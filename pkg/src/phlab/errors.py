"""Exception hierarchy.

Every error raised by the package derives from :class:`PhlabError`.  The CLI
maps the three families (configuration, numerical, gate) to exit codes.
"""


class PhlabError(Exception):
    exit_code = 1


class ConfigInvalid(PhlabError):
    exit_code = 2


class NumericalFailure(PhlabError):
    exit_code = 3


class GateInconclusive(PhlabError):
    exit_code = 4


# base
class NotUnimodular(ConfigInvalid):
    pass


class NotHyperbolic(ConfigInvalid):
    pass


class PeriodTooLarge(NumericalFailure):
    pass


# fibred
class NotElliptic(ConfigInvalid):
    pass


class DegenerateFibreMap(ConfigInvalid):
    pass


class NewtonDivergence(NumericalFailure):
    pass


# lyapunov
class RenormalizationFault(NumericalFailure):
    pass


# holonomy
class NotOnLeaf(ConfigInvalid):
    pass


class NoConvergence(NumericalFailure):
    pass


# projective / conformal
class SingularMatrix(NumericalFailure):
    pass


class HeavyAtom(NumericalFailure):
    def __init__(self, msg, cell=None):
        super().__init__(msg)
        self.cell = cell


class TrivialAction(ConfigInvalid):
    pass


class Inconclusive(GateInconclusive):
    pass


# uniformize
class SupMuTooLarge(ConfigInvalid):
    pass


class DegenerateLattice(NumericalFailure):
    pass


class NotConformalVerdict(GateInconclusive):
    pass


class NonConstantA(GateInconclusive):
    pass


class NotInteger(GateInconclusive):
    pass


class FitDefectExceeded(GateInconclusive):
    pass
