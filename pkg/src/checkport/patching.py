"""Parse model responses into patch blocks, apply them atomically, and
majority-vote across completions.

Wire format of one block, all four markers alone on their line:

    <<<<ORIGINAL
    ...lines as they appear in the code...
    ====
    >>>>REFACTORED
    ...replacement lines...
    <<<<END

Prose outside blocks is ignored. Matching is whole-line and
trim-insensitive; there is no fuzzy matching.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import AmbiguousOverlap, MalformedBlock, NoMatch

MARK_OPEN = "<<<<ORIGINAL"
MARK_SEP = "===="
MARK_REFACTORED = ">>>>REFACTORED"
MARK_END = "<<<<END"


@dataclass(frozen=True)
class PatchBlock:
    original: tuple[str, ...]
    refactored: tuple[str, ...]


@dataclass(frozen=True)
class Patch:
    blocks: tuple[PatchBlock, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.blocks)

    @property
    def refactored_line_count(self) -> int:
        return sum(len(b.refactored) for b in self.blocks)


EMPTY_PATCH = Patch()


@dataclass
class VoteResult:
    winner: Patch
    tally: dict[str, int]
    total: int
    winner_key: str = ""


def format_patch(p: Patch) -> str:
    """Render a patch in the block wire format (used by the mock backend)."""
    parts = []
    for b in p.blocks:
        parts.append(MARK_OPEN)
        parts.extend(b.original)
        parts.append(MARK_SEP)
        parts.append(MARK_REFACTORED)
        parts.extend(b.refactored)
        parts.append(MARK_END)
    return "\n".join(parts) + ("\n" if parts else "")


def parse_response(text: str) -> Patch:
    """Extract all blocks from a completion.

    A block opened by the ORIGINAL marker must run through its END marker
    with the separator markers in order; anything else raises
    MalformedBlock and the completion is discarded from the vote.
    """
    lines = text.split("\n")
    blocks: list[PatchBlock] = []
    i = 0
    n = len(lines)
    while i < n:
        if lines[i].strip() != MARK_OPEN:
            i += 1
            continue
        i += 1
        original: list[str] = []
        while i < n and lines[i].strip() != MARK_SEP:
            if lines[i].strip() in (MARK_OPEN, MARK_REFACTORED, MARK_END):
                raise MalformedBlock(f"unexpected marker {lines[i].strip()!r} "
                                     "inside original section")
            original.append(lines[i])
            i += 1
        if i >= n:
            raise MalformedBlock("block not terminated: missing separator")
        i += 1
        if i >= n or lines[i].strip() != MARK_REFACTORED:
            raise MalformedBlock("block not terminated: missing refactored marker")
        i += 1
        refactored: list[str] = []
        while i < n and lines[i].strip() != MARK_END:
            if lines[i].strip() in (MARK_OPEN, MARK_SEP, MARK_REFACTORED):
                raise MalformedBlock(f"unexpected marker {lines[i].strip()!r} "
                                     "inside refactored section")
            refactored.append(lines[i])
            i += 1
        if i >= n:
            raise MalformedBlock("block not terminated: missing end marker")
        i += 1
        if not [l for l in original if l.strip()]:
            raise MalformedBlock("block has an empty original section")
        blocks.append(PatchBlock(tuple(original), tuple(refactored)))
    return Patch(tuple(blocks))


def _trim(line: str) -> str:
    return line.strip()


def match_blocks(p: Patch, code: str) -> list[tuple[int, int]]:
    """Line spans (start, end-exclusive) each block matches, in block order.

    Each block takes the first match not overlapping an earlier block's
    span. NoMatch if a block's lines never occur; AmbiguousOverlap if they
    occur only inside regions other blocks already consumed.
    """
    lines = code.split("\n")
    trimmed = [_trim(l) for l in lines]
    consumed: list[tuple[int, int]] = []
    spans: list[tuple[int, int]] = []
    for b in p.blocks:
        pattern = [_trim(l) for l in b.original]
        candidates = []
        for start in range(0, len(lines) - len(pattern) + 1):
            if trimmed[start:start + len(pattern)] == pattern:
                candidates.append((start, start + len(pattern)))
        if not candidates:
            raise NoMatch(f"original lines not found: {b.original[0]!r}")
        free = [c for c in candidates
                if not any(c[0] < e and s < c[1] for s, e in consumed)]
        if not free:
            raise AmbiguousOverlap(
                f"all matches for {b.original[0]!r} overlap other blocks")
        spans.append(free[0])
        consumed.append(free[0])
    return spans


def apply_patch(p: Patch, code: str) -> str:
    """Apply every block or none: on any failure the code is returned as-is
    by the caller catching NoMatch/AmbiguousOverlap.
    """
    new_code, _ = apply_patch_spans(p, code)
    return new_code


def apply_patch_spans(p: Patch, code: str) -> tuple[str, list[tuple[int, int]]]:
    """Apply and also report the matched line spans in the original code."""
    if not p.blocks:
        return code, []
    spans = match_blocks(p, code)
    lines = code.split("\n")
    result: list[str] = []
    pos = 0
    for (start, end), block in sorted(zip(spans, p.blocks), key=lambda t: t[0][0]):
        result.extend(lines[pos:start])
        result.extend(block.refactored)
        pos = end
    result.extend(lines[pos:])
    return "\n".join(result), spans


def signature_changed(p: Patch, code: str, is_procedure: bool = True) -> bool:
    """Whether the patch counts as a signature change for the refactor flag.

    Procedures: true iff a block's matched region intersects the header
    lines (text before the body brace). Other declarations: true iff the
    patch is non-empty.
    """
    if not p.blocks:
        return False
    if not is_procedure:
        return True
    from .source_model import mask_comments_and_literals

    masked = mask_comments_and_literals(code)
    brace = masked.find("{")
    header_text = code if brace < 0 else code[:brace]
    sig_lines = header_text.count("\n") + 1
    try:
        spans = match_blocks(p, code)
    except (NoMatch, AmbiguousOverlap):
        return False
    return any(start < sig_lines for start, _ in spans)


def normalize_patch(p: Patch) -> Patch:
    """Trim each line and collapse internal whitespace runs."""
    def norm(lines):
        return tuple(re.sub(r"\s+", " ", l.strip()) for l in lines)

    return Patch(tuple(PatchBlock(norm(b.original), norm(b.refactored))
                       for b in p.blocks))


def serialize_patch(p: Patch) -> str:
    return json.dumps([[list(b.original), list(b.refactored)] for b in p.blocks])


def majority_vote(completions: list[str]) -> VoteResult:
    """Most frequent normalized patch across parseable completions.

    Ties break toward fewer blocks, then fewer refactored lines, then the
    lexicographically smallest serialized form, so the result is a pure
    function of the completion multiset. The returned winner is a concrete
    (un-normalized) representative of the winning class: its
    lexicographically smallest member, for the same reason.
    """
    classes: dict[str, list[Patch]] = {}
    tally: dict[str, int] = {}
    total = 0
    for text in completions:
        try:
            patch = parse_response(text)
        except MalformedBlock:
            continue
        total += 1
        key = serialize_patch(normalize_patch(patch))
        tally[key] = tally.get(key, 0) + 1
        classes.setdefault(key, []).append(patch)

    if not tally:
        return VoteResult(winner=EMPTY_PATCH, tally={}, total=0)

    def rank(key: str):
        members = classes[key]
        blocks = len(members[0].blocks)
        ref_lines = normalize_patch(members[0]).refactored_line_count
        return (-tally[key], blocks, ref_lines, key)

    winner_key = min(tally, key=rank)
    winner = min(classes[winner_key], key=serialize_patch)
    return VoteResult(winner=winner, tally=tally, total=total,
                      winner_key=winner_key)
