"""Exception hierarchy shared by all rftrace modules."""


class RFTraceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RFTraceError):
    """Tensor or attribute shapes are inconsistent with an operation."""


class GraphError(RFTraceError):
    """Graph spec is malformed (parse, validation or schema violation).

    Carries the offending node id and field path when known, so CLI error
    reports can point at the exact location in the JSON document.
    """

    def __init__(self, message, node_id=None, field=None):
        self.node_id = node_id
        self.field = field
        where = ""
        if node_id is not None:
            where += f" [node {node_id!r}]"
        if field is not None:
            where += f" [field {field!r}]"
        super().__init__(message + where)


class WeightError(RFTraceError):
    """Weight store entry is missing or does not match node attributes."""


class TraceError(RFTraceError):
    """Receptive-field back-tracing failed (malformed trace geometry)."""
