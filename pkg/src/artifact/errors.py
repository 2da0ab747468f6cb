"""Error type shared by every module.

Each error carries a short kebab-case ``kind`` (for example ``invalid-parameter``)
and maps onto one of the CLI exit codes.
"""

# kinds that map to exit code 3; everything else not listed as internal is 2
_NONCONVERGENCE = {"nonconvergence", "chain-too-long"}
_INTERNAL = {"internal-invariant", "measure-degenerate"}


class ArtifactError(ValueError):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)

    @property
    def exit_code(self) -> int:
        if self.kind in _NONCONVERGENCE:
            return 3
        if self.kind in _INTERNAL:
            return 4
        return 2


class NearSetWarning(UserWarning):
    """Potential evaluated closer to the set than the standoff recommends."""
