"""Fine-tuning prompts for next-POI generation, plus cropping and blank augmentation."""

import json
import random
from dataclasses import dataclass, field

INSTRUCTION_TIMED = (
    "Here is a record of a user's POI accesses, your task is based on the history "
    "to predict the POI that the user is likely to access at the specified time."
)
INSTRUCTION_UNTIMED = (
    "Here is a record of a user's POI accesses, your task is based on the history "
    "to predict the next POI that the user is likely to access."
)
VARIANTS = ("full", "no_sid", "no_time")
TIME_FORMAT = "%Y-%m-%d %H:%M"
BLANK = "<blank>"
PROMPT_END = "is likely to visit:"


@dataclass
class PromptExample:
    instruction: str
    input: str
    target: str
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"instruction": self.instruction, "input": self.input, "output": self.target, "meta": self.meta}


@dataclass
class AugmentPolicy:
    max_history: int = 50
    blank_rate: int = 5

    def __post_init__(self):
        if self.max_history < 2:
            raise ValueError("max_history must be >= 2")
        if self.blank_rate < 1:
            raise ValueError("blank_rate must be >= 1")


def rid_token(n):
    return f"<{n}>"


def render_prompt(history, target_time, uid, variant="full", target=""):
    """Render one prompt.

    ``history`` is a list of ``(token, datetime)`` pairs where ``token`` is an
    already rendered POI identifier (semantic ID, RID such as ``<3312>``, or
    the blank marker). ``target_time`` is ignored by the ``no_time`` variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if not history:
        raise ValueError("cannot render a prompt from an empty history")
    user = f"user_<{uid}>"
    if variant == "no_time":
        clauses = [tok for tok, _ in history]
        body = ", visited ".join(clauses)
        text = f"The {user} visited: {body}, and in the next time {user} {PROMPT_END}"
        return PromptExample(INSTRUCTION_UNTIMED, text, target)
    clauses = [f"{tok} at {t.strftime(TIME_FORMAT)}" for tok, t in history]
    body = ", visited ".join(clauses)
    text = f"The {user} visited: {body}. When {target_time.strftime(TIME_FORMAT)} {user} {PROMPT_END}"
    return PromptExample(INSTRUCTION_TIMED, text, target)


def crop_sequences(seq, max_history):
    """Split a sequence into training windows.

    Longer than twice ``max_history``: consecutive non-overlapping windows,
    keeping a tail of at least two events. Between one and two times: two
    windows of ``max_history``, one anchored at each end, so they overlap
    and together cover the sequence. Otherwise the sequence itself.
    """
    if max_history < 2:
        raise ValueError("max_history must be >= 2")
    n = len(seq)
    if n <= max_history:
        return [list(seq)]
    if n <= 2 * max_history:
        return [list(seq[:max_history]), list(seq[n - max_history :])]
    out = []
    for start in range(0, n, max_history):
        window = list(seq[start : start + max_history])
        if len(window) >= 2:
            out.append(window)
    return out


def poi_tokens(registry=None, rids=None):
    """Token lookup ``poi_id -> str`` from a SID registry or an RID table."""
    if rids is not None:
        return lambda pid: rid_token(rids[pid])
    return registry.render


def make_training_set(sequences, registry, policy=None, seed=0, variant="full", rids=None, split="train"):
    """Prompt examples from per-user check-in sequences.

    Each cropped window yields one example. Counting windows in user order,
    every ``blank_rate``-th example asks for a blanked-out historical POI
    instead of the next one. The result is shuffled with ``seed``.
    """
    policy = policy or AugmentPolicy()
    token = poi_tokens(registry, rids)
    rng = random.Random(seed)
    examples = []
    counter = 0
    for uid in sorted(sequences):
        for w, window in enumerate(crop_sequences(sequences[uid], policy.max_history)):
            if len(window) < 2:
                continue
            for e in window:
                if rids is None and e.poi_id not in registry:
                    raise KeyError(f"POI {e.poi_id!r} has no semantic ID")
                if rids is not None and e.poi_id not in rids:
                    raise KeyError(f"POI {e.poi_id!r} has no numeric ID")
            counter += 1
            meta = {"user": uid, "split": split, "window": w}
            if counter % policy.blank_rate == 0:
                j = rng.randrange(len(window) - 1)
                hist = [(BLANK if i == j else token(e.poi_id), e.timestamp) for i, e in enumerate(window)]
                ex = render_prompt(hist, window[j].timestamp, uid, variant, token(window[j].poi_id))
                meta.update(kind="blank", position=j)
            else:
                hist = [(token(e.poi_id), e.timestamp) for e in window[:-1]]
                ex = render_prompt(hist, window[-1].timestamp, uid, variant, token(window[-1].poi_id))
                meta.update(kind="next")
            ex.meta = meta
            examples.append(ex)
    rng.shuffle(examples)
    return examples


def write_jsonl(examples, path):
    if not examples:
        raise ValueError("refusing to write an empty example file")
    try:
        with open(path, "w", encoding="utf-8") as f:
            for ex in examples:
                f.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(PromptExample(d["instruction"], d["input"], d["output"], d.get("meta", {})))
    return out
