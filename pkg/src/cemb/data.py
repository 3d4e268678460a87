"""NLI / STS / probe file formats and the seeded synthetic corpus generator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .batching import CONTRADICTION, ENTAILMENT, LABEL_IDS, NEUTRAL, LabeledPair
from .errors import DataError, ParameterError, UsageError
from .evaluation import ProbeTask, StsPair

# --- NLI JSONL ---------------------------------------------------------------------


def load_nli(path: str | Path) -> list[LabeledPair]:
    """Parse JSONL records {"premise", "hypothesis", "label"} in file order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            premise, hypothesis, label = rec.get("premise"), rec.get("hypothesis"), rec.get("label")
            if not isinstance(premise, str) or not premise.strip():
                raise DataError(f"{path}:{lineno}: missing or empty premise")
            if not isinstance(hypothesis, str) or not hypothesis.strip():
                raise DataError(f"{path}:{lineno}: missing or empty hypothesis")
            if label not in LABEL_IDS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            pairs.append(LabeledPair(premise, hypothesis, label))
    if not pairs:
        raise UsageError(f"{path}: file contains no records")
    return pairs


def write_nli(pairs: Sequence[LabeledPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"premise": p.premise, "hypothesis": p.hypothesis, "label": p.label}) + "\n")


# --- STS TSV -----------------------------------------------------------------------


def load_sts(path: str | Path) -> list[StsPair]:
    """TSV with columns subset_name, sentence_a, sentence_b, gold_score (no header)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    out = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(row)}")
            try:
                score = float(row[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: gold score {row[3]!r} is not a number") from None
            if not 0.0 <= score <= 5.0:
                raise DataError(f"{path}:{lineno}: gold score {score} outside [0, 5]")
            out.append(StsPair(row[1], row[2], score, row[0]))
    if not out:
        raise DataError(f"{path}: file contains no pairs")
    return out


def write_sts(pairs: Sequence[StsPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
        for p in pairs:
            writer.writerow([p.subset_name, p.sentence_a, p.sentence_b, repr(float(p.gold_score))])


# --- probe JSONL + manifest ---------------------------------------------------------


def load_probe_jsonl(path: str | Path, name: str, n_classes: int) -> ProbeTask:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            label = rec.get("label")
            if not isinstance(label, int) or not 0 <= label < n_classes:
                raise DataError(f"{path}:{lineno}: label must be an int in [0, {n_classes})")
            if "text" in rec:
                examples.append((rec["text"], label))
            elif "text_a" in rec and "text_b" in rec:
                examples.append(((rec["text_a"], rec["text_b"]), label))
            else:
                raise DataError(f"{path}:{lineno}: need 'text' or 'text_a'+'text_b'")
    if not examples:
        raise DataError(f"{path}: file contains no examples")
    return ProbeTask(name, examples, n_classes)


def write_probe_jsonl(task: ProbeTask, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for text, label in task.examples:
            rec = {"text_a": text[0], "text_b": text[1]} if isinstance(text, tuple) else {"text": text}
            rec["label"] = int(label)
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path: str | Path) -> list[ProbeTask]:
    """Task manifest: {"tasks": [{"name", "path", "n_classes"}, ...]}; paths relative to the manifest."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        entries = manifest["tasks"]
        return [load_probe_jsonl(path.parent / e["path"], e["name"], int(e["n_classes"])) for e in entries]
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed task manifest ({exc})") from None


# --- synthetic corpus ---------------------------------------------------------------

# Each theme: subjects, (verb, paraphrase verb, base form) triples, objects, places, adjectives.
THEMES = [
    {"subj": ["dog", "puppy", "cat", "kitten", "horse", "rabbit", "goat", "pony"],
     "verb": [("chases", "runs after", "chase"), ("carries", "holds", "carry"), ("sniffs", "smells", "sniff"),
              ("drops", "lets go of", "drop"), ("finds", "discovers", "find"), ("licks", "tastes", "lick")],
     "obj": ["ball", "stick", "bone", "toy", "frisbee", "rope", "shoe", "blanket"],
     "place": ["park", "yard", "meadow", "barn", "garden", "field"],
     "adj": ["brown", "small", "fluffy", "muddy", "sleepy", "spotted"]},
    {"subj": ["chef", "cook", "baker", "waiter", "grandmother", "student", "host", "butcher"],
     "verb": [("slices", "cuts", "slice"), ("stirs", "mixes", "stir"), ("tastes", "samples", "taste"),
              ("serves", "offers", "serve"), ("bakes", "prepares", "bake"), ("washes", "rinses", "wash")],
     "obj": ["bread", "soup", "onion", "cake", "pasta", "salad", "fish", "pie"],
     "place": ["kitchen", "restaurant", "bakery", "diner", "cafeteria", "market"],
     "adj": ["busy", "tired", "young", "cheerful", "careful", "hungry"]},
    {"subj": ["player", "runner", "swimmer", "athlete", "coach", "goalkeeper", "skater", "climber"],
     "verb": [("kicks", "boots", "kick"), ("throws", "tosses", "throw"), ("catches", "grabs", "catch"),
              ("trains", "practices", "train"), ("wins", "earns", "win"), ("lifts", "raises", "lift")],
     "obj": ["trophy", "racket", "helmet", "medal", "whistle", "net", "weights", "flag"],
     "place": ["stadium", "gym", "pool", "track", "court", "arena"],
     "adj": ["fast", "strong", "famous", "nervous", "sweaty", "tall"]},
    {"subj": ["pilot", "driver", "sailor", "mechanic", "passenger", "cyclist", "conductor", "trucker"],
     "verb": [("repairs", "fixes", "repair"), ("parks", "leaves", "park"), ("steers", "guides", "steer"),
              ("loads", "fills", "load"), ("paints", "colors", "paint"), ("inspects", "checks", "inspect")],
     "obj": ["truck", "boat", "plane", "bicycle", "engine", "trailer", "wagon", "scooter"],
     "place": ["harbor", "airport", "garage", "highway", "station", "dock"],
     "adj": ["old", "angry", "calm", "skilled", "lonely", "bald"]},
    {"subj": ["painter", "singer", "dancer", "poet", "drummer", "violinist", "actor", "sculptor"],
     "verb": [("paints", "draws", "paint"), ("plays", "performs", "play"), ("writes", "composes", "write"),
              ("studies", "reads", "study"), ("sells", "trades", "sell"), ("shows", "presents", "show")],
     "obj": ["portrait", "song", "poem", "guitar", "canvas", "melody", "statue", "script"],
     "place": ["studio", "theater", "gallery", "concert", "library", "museum"],
     "adj": ["gifted", "shy", "proud", "quiet", "famous", "eager"]},
    {"subj": ["farmer", "gardener", "forester", "beekeeper", "shepherd", "ranger", "hiker", "fisher"],
     "verb": [("plants", "sows", "plant"), ("waters", "sprinkles", "water"), ("harvests", "gathers", "harvest"),
              ("prunes", "trims", "prune"), ("digs", "excavates", "dig"), ("counts", "tallies", "count")],
     "obj": ["corn", "apples", "tomatoes", "pumpkin", "roses", "wheat", "seeds", "hay"],
     "place": ["farm", "orchard", "greenhouse", "forest", "valley", "hill"],
     "adj": ["patient", "dusty", "wise", "sunburned", "strong", "early"]},
]


@dataclass(frozen=True)
class SynthSpec:
    n_topics: int = 4
    premises_per_topic: int = 50
    hypotheses_per_premise: int = 3
    sts_premises_per_topic: int = 20
    probe_per_topic: int = 50
    seed: int = 0
    themes: tuple = field(default=None, repr=False)  # per-topic word pools; defaults to THEMES

    def __post_init__(self):
        if self.hypotheses_per_premise < 3:
            raise ParameterError("hypotheses_per_premise must be at least 3")
        if min(self.n_topics, self.premises_per_topic) < 1:
            raise ParameterError("n_topics and premises_per_topic must be positive")
        if self.n_topics > len(self.pools):
            raise ParameterError(f"only {len(self.pools)} word themes are available")
        if self.sts_premises_per_topic < 1:
            raise ParameterError("sts_premises_per_topic must be positive")

    @property
    def pools(self) -> list:
        return list(self.themes) if self.themes is not None else THEMES


@dataclass
class SynthCorpus:
    train: list[LabeledPair]
    sts: list[StsPair]
    probe: ProbeTask


class _Scene:
    """One premise's slot fillers, from which all related sentences are rendered."""

    def __init__(self, topic: int, theme: dict, rng: np.random.Generator):
        pick = lambda key: theme[key][rng.integers(len(theme[key]))]  # noqa: E731
        self.topic = topic
        self.subj, self.verb, self.obj = pick("subj"), pick("verb"), pick("obj")
        self.place, self.adj = pick("place"), pick("adj")
        self.theme = theme

    @property
    def key(self):
        return (self.topic, self.subj, self.verb, self.obj, self.place, self.adj)

    def premise(self) -> str:
        return f"A {self.adj} {self.subj} {self.verb[0]} a {self.obj} in the {self.place}."

    def entailment(self, variant: int) -> str:
        return [
            f"The {self.subj} {self.verb[1]} a {self.obj}.",
            f"A {self.subj} {self.verb[0]} something in the {self.place}.",
            f"There is a {self.adj} {self.subj} in the {self.place}.",
        ][variant % 3]

    def neutral(self, rng: np.random.Generator, variant: int) -> str:
        other_obj = self._other("obj", self.obj, rng)
        other_adj = self._other("adj", self.adj, rng)
        return [
            f"The {self.subj} {self.verb[0]} a {other_obj} because it is {other_adj}.",
            f"A {other_adj} {self.subj} will {self.verb[2]} a {other_obj} tomorrow.",
        ][variant % 2]

    def contradiction(self, rng: np.random.Generator, variant: int, other: "_Scene") -> str:
        return [
            f"The {self.subj} does not {self.verb[2]} the {self.obj}.",
            f"A {other.subj} {other.verb[0]} a {other.obj} in the {other.place}.",
            f"Nobody {self.verb[0]} a {self.obj} in the {self.place}.",
        ][variant % 3]

    def _other(self, key, current, rng):
        choices = [w for w in self.theme[key] if w != current]
        return choices[rng.integers(len(choices))]


def _draw_scenes(spec: SynthSpec, per_topic: int, rng: np.random.Generator, taken: set) -> list[_Scene]:
    scenes = []
    for topic in range(spec.n_topics):
        theme = spec.pools[topic]
        made = 0
        for _ in range(200 * per_topic):
            if made == per_topic:
                break
            s = _Scene(topic, theme, rng)
            if s.key not in taken:
                taken.add(s.key)
                scenes.append(s)
                made += 1
        else:
            raise ParameterError(f"theme {topic} cannot supply {per_topic} distinct premises")
    return scenes


def gen_synth(spec: SynthSpec) -> SynthCorpus:
    """Seeded template corpus: NLI training pairs, graded STS pairs, and a topic probe task.

    Every premise gets at least one entailment hypothesis. STS and probe
    sentences come from premises never seen in training.
    """
    rng = np.random.default_rng(spec.seed)
    taken: set = set()
    train_scenes = _draw_scenes(spec, spec.premises_per_topic, rng, taken)
    cycle = (ENTAILMENT, NEUTRAL, CONTRADICTION)
    train = []
    for i, s in enumerate(train_scenes):
        others = [o for o in train_scenes if o.topic != s.topic] or train_scenes
        for h in range(spec.hypotheses_per_premise):
            label = cycle[h % 3]
            variant = int(rng.integers(6))
            if label == ENTAILMENT:
                hyp = s.entailment(variant)
            elif label == NEUTRAL:
                hyp = s.neutral(rng, variant)
            else:
                hyp = s.contradiction(rng, variant, others[rng.integers(len(others))])
            train.append(LabeledPair(s.premise(), hyp, label))

    sts_scenes = _draw_scenes(spec, spec.sts_premises_per_topic, rng, taken)
    sts = []
    for i, s in enumerate(sts_scenes):
        same = [o for o in sts_scenes if o.topic == s.topic and o is not s]
        diff = [o for o in sts_scenes if o.topic != s.topic]
        subset = f"synth{i % 2}"
        p = s.premise()
        sts.append(StsPair(p, s.entailment(0), 5.0, subset))
        sts.append(StsPair(p, s.entailment(1 + int(rng.integers(2))), 4.0, subset))
        sts.append(StsPair(p, s.neutral(rng, int(rng.integers(2))), 2.5, subset))
        if same:
            sts.append(StsPair(p, same[rng.integers(len(same))].entailment(0), 1.0, subset))
        if diff:
            sts.append(StsPair(p, diff[rng.integers(len(diff))].entailment(0), 0.0, subset))

    probe_scenes = _draw_scenes(spec, spec.probe_per_topic, rng, taken) if spec.probe_per_topic else []
    probe = ProbeTask("synth-topic", [(s.premise(), s.topic) for s in probe_scenes], max(spec.n_topics, 2))
    return SynthCorpus(train, sts, probe)
