"""Exception hierarchy shared by all modules."""


class ReachGuardError(Exception):
    """Base class for every error raised by this package."""


class ScenarioError(ReachGuardError):
    """Malformed scenario file or violated scenario invariant."""


class OutOfBandError(ReachGuardError):
    """Point too far from a lane centerline to be projected."""


class OffRoadError(ReachGuardError):
    """An entity is not located on any lane."""


class FormulaError(ReachGuardError):
    """Unknown atom, parse failure or malformed formula."""


class UnsupportedFragmentError(FormulaError):
    """Formula is outside the G / FG fragment handled by the automaton compiler."""


class PredicateError(ReachGuardError):
    """Predicate evaluation failed (unknown atom, missing obstacle, bad parameters)."""


class UnknownRuleError(ReachGuardError):
    pass


class ActionError(ReachGuardError):
    """Action cannot be translated or labeled."""


class NoLabelError(ActionError):
    pass


class ReachabilityError(ReachGuardError):
    """Reachability analysis could not be started (e.g. ego initially colliding)."""


class SchemaViolation(ReachGuardError):
    """Decision-maker output does not match the ranked-action schema.

    ``defect`` names the defect class: ``json``, ``shape``, ``unknown_action``,
    ``infeasible``, ``duplicate`` or ``too_long``.
    """

    def __init__(self, defect: str, message: str):
        super().__init__(f"{defect}: {message}")
        self.defect = defect


class MakerTimeout(ReachGuardError):
    pass


class SimulationError(ReachGuardError):
    pass
