"""Dot-numeric version comparison and the constraint grammar used by the
knowledge tree.

Constraint grammar (comma joins clauses, all must hold):

    exact        5.17.1
    wildcard     5.17.*     (5.17.x is accepted as a synonym)
    upper bound  <=5.17.1
    lower bound  >=5.4.0
    range        5.4.0 - 5.17.1      (inclusive both ends)
    empty        ""                   matches every version

Comparison is numeric per dot component; missing components count as zero
(so 5.17 == 5.17.0). A non-numeric suffix ranks below the bare version it
hangs off: 5.17.1-beta < 5.17.1. Versions like "banana" with no leading
digits do not parse; callers treat them as unknown, not as errors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import total_ordering


class UnparseableVersion(ValueError):
    """The version string has no leading numeric component."""


class MalformedConstraint(ValueError):
    """The constraint expression does not follow the grammar."""


_LEADING_NUM_RE = re.compile(r"^(\d+)(.*)$")


@total_ordering
@dataclass(frozen=True)
class Version:
    """A parsed version: numeric release components plus an optional suffix."""

    release: tuple[int, ...]
    suffix: str = ""

    @classmethod
    def parse(cls, text: str) -> "Version":
        raw = text.strip()
        if raw[:1].lower() == "v" and len(raw) > 1 and raw[1].isdigit():
            raw = raw[1:]
        if not raw or not raw[0].isdigit():
            raise UnparseableVersion(f"not a dotted version: {text!r}")
        release: list[int] = []
        suffix = ""
        pieces = raw.split(".")
        for i, piece in enumerate(pieces):
            match = _LEADING_NUM_RE.match(piece)
            if match is None:
                suffix = ".".join(pieces[i:])
                break
            release.append(int(match.group(1)))
            rest = match.group(2)
            if rest:
                suffix = rest.lstrip("-_")
                tail = ".".join(pieces[i + 1 :])
                if tail:
                    suffix = f"{suffix}.{tail}" if suffix else tail
                break
        return cls(release=tuple(release), suffix=suffix)

    def padded(self, width: int) -> tuple[int, ...]:
        return self.release + (0,) * (width - len(self.release))

    def _cmp_key(self, width: int) -> tuple:
        # A bare version outranks the same numbers with any suffix.
        return (self.padded(width), 1 if not self.suffix else 0, self.suffix)

    def compare(self, other: "Version") -> int:
        width = max(len(self.release), len(other.release))
        a, b = self._cmp_key(width), other._cmp_key(width)
        return (a > b) - (a < b)

    def __lt__(self, other: "Version") -> bool:
        return self.compare(other) < 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Version):
            return NotImplemented
        return self.compare(other) == 0

    def __hash__(self) -> int:
        release = self.release
        while release and release[-1] == 0:
            release = release[:-1]
        return hash((release, self.suffix))

    def __str__(self) -> str:
        text = ".".join(str(c) for c in self.release)
        return f"{text}-{self.suffix}" if self.suffix else text


# Clause tags; each clause is (tag, payload...)
_ANY = "any"
_EXACT = "exact"
_PREFIX = "prefix"
_LE = "le"
_GE = "ge"
_RANGE = "range"


@dataclass(frozen=True)
class VersionConstraint:
    """A parsed constraint expression; matches() evaluates all clauses."""

    expression: str
    clauses: tuple[tuple, ...]

    @classmethod
    def parse(cls, expression: str) -> "VersionConstraint":
        text = expression.strip()
        if not text:
            return cls(expression=expression, clauses=((_ANY,),))
        clauses = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                raise MalformedConstraint(f"empty clause in {expression!r}")
            clauses.append(_parse_clause(part, expression))
        return cls(expression=expression, clauses=tuple(clauses))

    @property
    def matches_all(self) -> bool:
        return all(clause[0] == _ANY for clause in self.clauses)

    def matches(self, version: str) -> bool:
        """True when the version satisfies every clause.

        Raises UnparseableVersion when the version string cannot be parsed
        and the constraint is not the match-everything constraint.
        """
        if self.matches_all:
            return True
        parsed = Version.parse(version)
        return all(_clause_matches(clause, parsed) for clause in self.clauses)


def _parse_version_or_raise(text: str, expression: str) -> Version:
    try:
        return Version.parse(text)
    except UnparseableVersion as err:
        raise MalformedConstraint(
            f"bad version {text!r} in constraint {expression!r}"
        ) from err


def _parse_clause(part: str, expression: str) -> tuple:
    if part.startswith("<="):
        return (_LE, _parse_version_or_raise(part[2:].strip(), expression))
    if part.startswith(">="):
        return (_GE, _parse_version_or_raise(part[2:].strip(), expression))
    if part.startswith("<") or part.startswith(">") or part.startswith("="):
        raise MalformedConstraint(
            f"only <= and >= bounds are supported, got {part!r}"
        )
    if " - " in part:
        low_text, _, high_text = part.partition(" - ")
        low = _parse_version_or_raise(low_text.strip(), expression)
        high = _parse_version_or_raise(high_text.strip(), expression)
        return (_RANGE, low, high)
    if part.endswith(".*") or part.endswith(".x") or part.endswith(".X"):
        head = part[:-2]
        labels = head.split(".")
        if not head or not all(label.isdigit() for label in labels):
            raise MalformedConstraint(f"bad wildcard clause {part!r}")
        return (_PREFIX, tuple(int(label) for label in labels))
    if "*" in part:
        raise MalformedConstraint(f"wildcard only allowed as trailing .* ({part!r})")
    return (_EXACT, _parse_version_or_raise(part, expression))


def _clause_matches(clause: tuple, version: Version) -> bool:
    tag = clause[0]
    if tag == _ANY:
        return True
    if tag == _EXACT:
        return version.compare(clause[1]) == 0
    if tag == _PREFIX:
        prefix = clause[1]
        return version.padded(max(len(prefix), len(version.release)))[: len(prefix)] == prefix
    if tag == _LE:
        return version.compare(clause[1]) <= 0
    if tag == _GE:
        return version.compare(clause[1]) >= 0
    if tag == _RANGE:
        return clause[1].compare(version) <= 0 and version.compare(clause[2]) <= 0
    raise AssertionError(f"unknown clause tag {tag!r}")


def constraint_matches(expression: str, version: str) -> bool:
    """One-shot parse-and-match; same error contract as the methods."""
    return VersionConstraint.parse(expression).matches(version)
