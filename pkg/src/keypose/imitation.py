"""Demonstration-conditioned prompt assembly and demo/query pair sampling.

A one-shot imitation prompt serializes a demonstration record and a query
("live") record in the fixed order

    <demo_img:PATH> <demo state tokens> <demo trajectory tokens>
    <live_img:PATH> <live state tokens>  ->  <query trajectory tokens>

with no natural-language task description; the model must infer the task
from the demonstration.  Pairs are sampled uniformly without replacement
over ordered same-task (demo, query) combinations, never pairing a scene
with itself.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecConfig, TokenSequence, encode_robot_state, encode_trajectory
from .errors import InsufficientPairs, InvalidPair, MissingField
from .scenegen import (
    DEFAULT_TEMPLATES,
    AssetSpec,
    DatasetRecord,
    parse_instruction,
)

_SENTINEL_RE = re.compile(r"<(demo_img|live_img):([^>\s]+)>")


@dataclass(frozen=True)
class TaskKey:
    """Canonical task identity shared by a demonstration and its query.

    Templated instructions parse into (source, target, relation); free-text
    instructions fall back to exact-string identity in ``text``.
    """

    source: AssetSpec | None = None
    target: AssetSpec | None = None
    relation: str = "onto"
    text: str | None = None


def task_key(instruction: str, templates=DEFAULT_TEMPLATES) -> TaskKey:
    try:
        src, dst = parse_instruction(instruction, templates)
        return TaskKey(source=src, target=dst)
    except ValueError:
        return TaskKey(text=instruction)


@dataclass(frozen=True, eq=False)
class TaskIndex:
    """Lookup table: task identity -> scene ids, plus the records by id."""

    buckets: dict  # TaskKey -> list of scene ids (record order)
    records: dict  # scene id -> DatasetRecord
    skipped: int  # records without a usable instruction

    @property
    def total_pairs(self) -> int:
        return sum(len(ids) * (len(ids) - 1) for ids in self.buckets.values())


def build_task_index(records, templates=DEFAULT_TEMPLATES) -> TaskIndex:
    """Group records by task identity; deterministic, exhaustive.

    Records whose instruction is missing or empty are skipped and counted in
    ``TaskIndex.skipped``.
    """
    buckets: dict = {}
    by_id: dict = {}
    skipped = 0
    for record in records:
        if not record.instruction or not record.instruction.strip():
            skipped += 1
            continue
        key = task_key(record.instruction, templates)
        buckets.setdefault(key, []).append(record.scene_id)
        by_id[record.scene_id] = record
    return TaskIndex(buckets=buckets, records=by_id, skipped=skipped)


@dataclass(frozen=True, eq=False)
class PairSample:
    demo: DatasetRecord
    query: DatasetRecord

    def __post_init__(self):
        if self.demo.scene_id == self.query.scene_id:
            raise InvalidPair(
                f"scene {self.demo.scene_id} cannot be both demo and query"
            )


def _sample_without_replacement(total: int, k: int, rng) -> list:
    """Uniform ordered k-subset of range(total) in O(k) memory (Floyd)."""
    selected = set()
    for j in range(total - k, total):
        t = int(rng.integers(0, j + 1))
        selected.add(t if t not in selected else j)
    chosen = sorted(selected)
    order = rng.permutation(k)
    return [chosen[i] for i in order]


def sample_pairs(index: TaskIndex, k: int, seed: int) -> list:
    """k ordered same-task (demo, query) pairs, each combination at most once.

    Uniform without replacement over all ordered pairs; deterministic per
    seed.

    Raises:
        InsufficientPairs: if k exceeds the number of distinct ordered pairs.
    """
    total = index.total_pairs
    if k > total:
        raise InsufficientPairs(f"requested {k} pairs but only {total} exist")
    if k < 0:
        raise ValueError("k must be nonnegative")
    rng = np.random.default_rng(seed)
    flat = _sample_without_replacement(total, k, rng)

    # Map flat indices into (bucket, ordered-pair) coordinates.
    bucket_ids = list(index.buckets.values())
    offsets = []
    acc = 0
    for ids in bucket_ids:
        offsets.append(acc)
        acc += len(ids) * (len(ids) - 1)

    pairs = []
    for flat_idx in flat:
        b = 0
        while b + 1 < len(offsets) and offsets[b + 1] <= flat_idx:
            b += 1
        ids = bucket_ids[b]
        local = flat_idx - offsets[b]
        m = len(ids)
        demo_i, query_i = divmod(local, m - 1)
        if query_i >= demo_i:
            query_i += 1  # skip the diagonal
        pairs.append(
            PairSample(index.records[ids[demo_i]], index.records[ids[query_i]])
        )
    return pairs


# ---------------------------------------------------------------------------
# prompt assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prompt:
    """A serialized prompt and its target token string."""

    prompt: str
    target: str

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "target": self.target}


def _require(record: DatasetRecord, field_name: str):
    value = getattr(record, field_name)
    if value is None or (isinstance(value, str) and not value.strip()):
        raise MissingField(f"record {record.scene_id} lacks {field_name}")
    return value


def _image_sentinel(tag: str, record: DatasetRecord) -> str:
    path = _require(record, "rgb")
    if ">" in path or any(c.isspace() for c in path):
        raise MissingField(f"record {record.scene_id} image path {path!r} not serializable")
    return f"<{tag}:{path}>"


def _state_tokens(record: DatasetRecord, cfg: CodecConfig) -> str:
    cam = record.camera if cfg.frame.value == "image" else None
    return encode_robot_state(_require(record, "robot_state"), cam, cfg).text()


def _trajectory_tokens(record: DatasetRecord, cfg: CodecConfig) -> str:
    cam = record.camera if cfg.frame.value == "image" else None
    return encode_trajectory(_require(record, "trajectory"), cam, cfg).text()


def assemble_imitation_prompt(pair: PairSample, cfg: CodecConfig) -> Prompt:
    """Serialize demo image/state/trajectory + live image/state; target is the
    query trajectory.  No natural-language task description is included."""
    body = " ".join(
        [
            _image_sentinel("demo_img", pair.demo),
            _state_tokens(pair.demo, cfg),
            _trajectory_tokens(pair.demo, cfg),
            _image_sentinel("live_img", pair.query),
            _state_tokens(pair.query, cfg),
        ]
    )
    return Prompt(prompt=body, target=_trajectory_tokens(pair.query, cfg))


def assemble_language_prompt(record: DatasetRecord, cfg: CodecConfig) -> Prompt:
    """Serialize live image + state + instruction; target is the trajectory."""
    instruction = _require(record, "instruction")
    body = " ".join(
        [
            _image_sentinel("live_img", record),
            _state_tokens(record, cfg),
            instruction,
        ]
    )
    return Prompt(prompt=body, target=_trajectory_tokens(record, cfg))


@dataclass(frozen=True)
class ParsedImitationPrompt:
    demo_image: str
    demo_state: TokenSequence
    demo_trajectory: TokenSequence
    live_image: str
    live_state: TokenSequence


def parse_imitation_prompt(text: str) -> ParsedImitationPrompt:
    """Recover the sections of an imitation prompt; lossless for assembled prompts."""
    sentinels = list(_SENTINEL_RE.finditer(text))
    if len(sentinels) != 2 or sentinels[0].group(1) != "demo_img" \
            or sentinels[1].group(1) != "live_img":
        raise MissingField("prompt must contain one demo_img and one live_img sentinel")
    demo_span = text[sentinels[0].end():sentinels[1].start()]
    live_span = text[sentinels[1].end():]
    demo_tokens = TokenSequence.from_text(demo_span)
    if len(demo_tokens) != 18:
        raise MissingField(
            f"demo section must hold 6 state + 12 trajectory tokens, got {len(demo_tokens)}"
        )
    live_state = TokenSequence.from_text(live_span)
    if len(live_state) != 6:
        raise MissingField(f"live section must hold 6 state tokens, got {len(live_state)}")
    return ParsedImitationPrompt(
        demo_image=sentinels[0].group(2),
        demo_state=TokenSequence(demo_tokens.ids[:6]),
        demo_trajectory=TokenSequence(demo_tokens.ids[6:]),
        live_image=sentinels[1].group(2),
        live_state=live_state,
    )


@dataclass(frozen=True)
class ParsedLanguagePrompt:
    live_image: str
    state: TokenSequence
    instruction: str


def parse_language_prompt(text: str) -> ParsedLanguagePrompt:
    sentinels = list(_SENTINEL_RE.finditer(text))
    if len(sentinels) != 1 or sentinels[0].group(1) != "live_img":
        raise MissingField("prompt must contain exactly one live_img sentinel")
    rest = text[sentinels[0].end():].strip()
    token_matches = list(re.finditer(r"(?:<loc\d{4}>|<seg\d{3}>|\s)+", rest))
    if not token_matches or token_matches[0].start() != 0:
        raise MissingField("prompt lacks state tokens after the image sentinel")
    state_text = token_matches[0].group(0)
    state = TokenSequence.from_text(state_text)
    if len(state) != 6:
        raise MissingField(f"expected 6 state tokens, got {len(state)}")
    instruction = rest[token_matches[0].end():].strip()
    if not instruction:
        raise MissingField("prompt lacks an instruction")
    return ParsedLanguagePrompt(
        live_image=sentinels[0].group(2), state=state, instruction=instruction
    )


def write_pair_files(pairs, prompts, out_dir) -> None:
    """One text file per sample: prompt line, then target line."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (pair, prompt) in enumerate(zip(pairs, prompts)):
        path = out / f"pair_{i:06d}.txt"
        path.write_text(f"{prompt.prompt}\n{prompt.target}\n")


def pairs_to_jsonl(pairs, prompts) -> str:
    lines = []
    for pair, prompt in zip(pairs, prompts):
        lines.append(
            json.dumps(
                {
                    "demo_scene": pair.demo.scene_id,
                    "query_scene": pair.query.scene_id,
                    **prompt.to_json(),
                }
            )
        )
    return "\n".join(lines) + "\n" if lines else ""
