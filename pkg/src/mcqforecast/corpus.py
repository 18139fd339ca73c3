"""MCQ interaction data: domain types, JSONL ingestion, simulation, decomposition, splits.

File formats (UTF-8 JSON Lines, one object per line):

``questions.jsonl``
    ``{"id": str, "topic_id": str, "text": str,
    "choices": [{"id": str, "text": str}, ...], "correct_choice_ids": [str, ...]}``
``interactions.jsonl``
    ``{"user_id": str, "session_id": str, "question_id": str,
    "selected_choice_ids": [str, ...], "timestamp": int (epoch ms),
    "is_correct": bool (optional; recomputed and checked when present)}``
``topics.jsonl`` (optional)
    ``{"id": str, "name": str, "parent_id": str | null}``
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .exceptions import (ConfigError, ContractError, IngestionError, ReferentialError,
                         SplitError)

CORRECT_ANSWER = "correct_answer"
STUDENT_ANSWER = "student_answer"
TASKS = (CORRECT_ANSWER, STUDENT_ANSWER)


@dataclass(frozen=True)
class Topic:
    id: str
    name: str
    parent_id: str | None = None


@dataclass(frozen=True)
class AnswerChoice:
    id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ContractError(f"answer choice {self.id!r} has empty text")


@dataclass(frozen=True)
class Question:
    id: str
    topic_id: str
    text: str
    choices: tuple
    correct_choice_ids: frozenset

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        object.__setattr__(self, "correct_choice_ids", frozenset(self.correct_choice_ids))
        ids = [c.id for c in self.choices]
        if len(ids) < 2:
            raise ContractError(f"question {self.id!r} needs at least 2 choices")
        if len(set(ids)) != len(ids):
            raise ContractError(f"question {self.id!r} has duplicate choice ids")
        if not self.correct_choice_ids:
            raise ContractError(f"question {self.id!r} has no correct choice")
        unknown = self.correct_choice_ids - set(ids)
        if unknown:
            raise ContractError(f"question {self.id!r}: correct ids {sorted(unknown)} not among choices")

    @property
    def choice_ids(self):
        return tuple(c.id for c in self.choices)

    def choice(self, choice_id):
        for c in self.choices:
            if c.id == choice_id:
                return c
        raise ReferentialError(f"question {self.id!r} has no choice {choice_id!r}")

    def choice_index(self, choice_id):
        return self.choice_ids.index(choice_id)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    session_id: str
    question_id: str
    selected_choice_ids: frozenset
    timestamp: int
    is_correct: bool

    def __post_init__(self):
        object.__setattr__(self, "selected_choice_ids", frozenset(self.selected_choice_ids))
        if not self.selected_choice_ids:
            raise ContractError("an interaction must select at least one choice")


@dataclass(frozen=True)
class StudentRecord:
    user_id: str
    interactions: tuple

    def __post_init__(self):
        object.__setattr__(self, "interactions", tuple(self.interactions))
        last = None
        for it in self.interactions:
            if it.user_id != self.user_id:
                raise ContractError(f"interaction of {it.user_id!r} inside record of {self.user_id!r}")
            if last is not None and it.timestamp < last:
                raise ContractError(f"record {self.user_id!r} is not in chronological order")
            last = it.timestamp

    def history_before(self, cutoff):
        """Interactions with timestamp strictly less than ``cutoff``."""
        return tuple(it for it in self.interactions if it.timestamp < cutoff)


@dataclass(frozen=True)
class BinaryInstance:
    """One (question, choice) pair with a 0/1 label.

    ``interaction_key`` groups the instances derived from the same
    interaction (student task only).
    """
    user_id: str | None
    question_id: str
    choice_id: str
    question_text: str
    choice_text: str
    label: int
    history_cutoff: int | None = None
    interaction_key: str | None = None


@dataclass(frozen=True)
class Corpus:
    questions: tuple
    records: tuple
    topics: tuple = ()
    _by_id: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "questions", tuple(self.questions))
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "topics", tuple(self.topics))
        object.__setattr__(self, "_by_id", {q.id: q for q in self.questions})
        if len(self._by_id) != len(self.questions):
            raise ContractError("duplicate question ids in corpus")
        _check_topics(self.topics)
        for rec in self.records:
            for it in rec.interactions:
                _check_interaction(it, self._by_id)

    def question(self, question_id):
        try:
            return self._by_id[question_id]
        except KeyError:
            raise ReferentialError(f"unknown question id {question_id!r}") from None

    @property
    def n_interactions(self):
        return sum(len(r.interactions) for r in self.records)

    def texts(self):
        """Every question and choice text, in corpus order."""
        out = []
        for q in self.questions:
            out.append(q.text)
            out.extend(c.text for c in q.choices)
        return out


def _check_topics(topics):
    parents = {t.id: t.parent_id for t in topics}
    for start in parents:
        seen = set()
        node = start
        while node is not None:
            if node in seen:
                raise ContractError(f"topic hierarchy has a cycle through {node!r}")
            seen.add(node)
            node = parents.get(node)


def _check_interaction(it, questions):
    q = questions.get(it.question_id)
    if q is None:
        raise ReferentialError(f"interaction of {it.user_id!r} references unknown question "
                               f"{it.question_id!r}")
    unknown = it.selected_choice_ids - set(q.choice_ids)
    if unknown:
        raise ReferentialError(f"interaction of {it.user_id!r} selects {sorted(unknown)} "
                               f"which are not choices of {q.id!r}")


# -- simulator ------------------------------------------------------------

def _digit_swap(a, b):
    s = a + b
    text = str(s)
    if len(text) < 2 or text[-1] == "0":
        return None
    swapped = int(text[::-1])
    return swapped if swapped != s else None


# Each rule maps the operands of "a + b" to the value a student with that
# misconception answers, or None when the rule does not apply.
RULES = {
    "correct": lambda a, b: a + b,
    "off_by_one_up": lambda a, b: a + b + 1,
    "off_by_one_down": lambda a, b: a + b - 1,
    "digit_swap": _digit_swap,
    "subtract_instead": lambda a, b: abs(a - b) if a != b else None,
    "multiply_instead": lambda a, b: a * b,
}
DISTRACTOR_RULES = tuple(r for r in RULES if r != "correct")

TEMPLATES = ("Compute {a} + {b}", "What is {a} + {b} ?", "Add {a} and {b}",
             "Calculate the sum of {a} and {b}")


@dataclass(frozen=True)
class SimulatorConfig:
    n_students: int = 2000
    n_questions: int = 200
    choices_per_question: int = 4
    n_topics: int = 10
    misconception_profiles: tuple = ("correct", "off_by_one_up", "off_by_one_down",
                                     "digit_swap", "subtract_instead", "multiply_instead")
    # fixed mixture shared by every student; None samples one per student
    mixture_weights: tuple | None = None
    correct_concentration: float = 0.4
    misconception_concentration: float = 0.08
    guess_rate: float = 0.02
    sessions_per_student: tuple = (1, 3)
    session_length: tuple = (3, 8)
    retry_rate: float = 0.0
    # largest operand for every topic; None widens the range topic by topic (9, 14, 19, ...)
    operand_max: int | None = 9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "misconception_profiles", tuple(self.misconception_profiles))
        if self.mixture_weights is not None:
            object.__setattr__(self, "mixture_weights", tuple(self.mixture_weights))
        object.__setattr__(self, "sessions_per_student", tuple(self.sessions_per_student))
        object.__setattr__(self, "session_length", tuple(self.session_length))

    def validate(self):
        errors = []
        if self.n_students < 1:
            errors.append("n_students: must be >= 1")
        if self.n_questions < 10:
            errors.append("n_questions: must be >= 10")
        if self.n_topics < 1 or self.n_topics > self.n_questions:
            errors.append("n_topics: must be between 1 and n_questions")
        if self.choices_per_question < 2:
            errors.append("choices_per_question: must be >= 2")
        elif self.choices_per_question - 1 > len(DISTRACTOR_RULES):
            errors.append(f"choices_per_question: {self.choices_per_question} exceeds the "
                          f"{len(DISTRACTOR_RULES)} distinct distractor rules + 1")
        unknown = [p for p in self.misconception_profiles if p not in RULES]
        if unknown or not self.misconception_profiles:
            errors.append(f"misconception_profiles: unknown {unknown}; valid {sorted(RULES)}")
        if self.mixture_weights is not None:
            w = self.mixture_weights
            if len(w) != len(self.misconception_profiles) or any(x < 0 or x > 1 for x in w) \
                    or abs(sum(w) - 1.0) > 1e-9:
                errors.append("mixture_weights: one probability per profile, summing to 1")
        for name in ("guess_rate", "retry_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name}: must be in [0, 1]")
        if self.operand_max is not None and self.operand_max < 3:
            errors.append("operand_max: must be >= 3")
        for name in ("correct_concentration", "misconception_concentration"):
            if getattr(self, name) <= 0:
                errors.append(f"{name}: must be > 0")
        for name in ("sessions_per_student", "session_length"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] < 1 or lo_hi[1] < lo_hi[0]:
                errors.append(f"{name}: expected [min, max] with 1 <= min <= max")
        if errors:
            raise ConfigError(errors)
        return self


def _make_questions(cfg, rng):
    topics = [Topic(f"t{k:02d}", f"Addition {k + 1}") for k in range(cfg.n_topics)]
    per_topic = [cfg.n_questions // cfg.n_topics + (k < cfg.n_questions % cfg.n_topics)
                 for k in range(cfg.n_topics)]
    needed = cfg.choices_per_question - 1
    letters = "ABCDEFGHIJ"
    questions, used = [], set()
    profile_rules = [p for p in cfg.misconception_profiles if p != "correct"]
    other_rules = [r for r in DISTRACTOR_RULES if r not in profile_rules]
    for k, count in enumerate(per_topic):
        hi = cfg.operand_max if cfg.operand_max is not None else 9 + 5 * k
        template = TEMPLATES[k % len(TEMPLATES)]
        made = attempts = 0
        while made < count:
            attempts += 1
            if attempts > 10000:
                raise ConfigError(f"n_questions: cannot generate {count} distinct questions "
                                  f"for topic {topics[k].id}")
            a, b = (int(v) for v in rng.integers(2, hi + 1, size=2))
            text = template.format(a=a, b=b)
            if text in used:
                continue
            s = a + b
            values = {}
            for rule in list(rng.permutation(profile_rules)) + other_rules:
                v = RULES[str(rule)](a, b)
                if v is not None and v > 0 and v != s and v not in values.values():
                    values[str(rule)] = v
                if len(values) == needed:
                    break
            if len(values) < needed:
                continue
            used.add(text)
            qid = f"q{len(questions):04d}"
            texts = [str(s)] + [str(v) for v in values.values()]
            order = rng.permutation(len(texts))
            choices = tuple(AnswerChoice(f"{qid}_{letters[i]}", texts[j]) for i, j in enumerate(order))
            correct = choices[int(np.argmin(order))].id
            questions.append(Question(qid, topics[k].id, text, choices,
                                      frozenset([correct])))
            made += 1
    return topics, questions


def _operands(question):
    nums = [int(t) for t in question.text.replace("?", " ").split() if t.isdigit()]
    return nums[0], nums[1]


def simulate_population(cfg):
    """Generate an arithmetic question bank and a student population answering it.

    Each student holds a persistent mixture over ``cfg.misconception_profiles``;
    every answer samples one rule from it (or guesses uniformly with
    probability ``guess_rate``).  When the rule's value is not offered as a
    choice the student falls back to the correct answer.  Students work
    through topics in sessions, continuing where they left off.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    topics, questions = _make_questions(cfg, rng)
    by_topic = {}
    for q in questions:
        by_topic.setdefault(q.topic_id, []).append(q)
    topic_ids = [t.id for t in topics]
    profiles = cfg.misconception_profiles
    prior = np.array([cfg.correct_concentration if p == "correct" else cfg.misconception_concentration
                      for p in profiles])
    value_to_choice = {
        q.id: {int(c.text): c.id for c in q.choices} for q in questions}
    operands = {q.id: _operands(q) for q in questions}
    base_ms = 1_700_000_000_000

    records = []
    for u in range(cfg.n_students):
        user = f"u{u:05d}"
        weights = (np.array(cfg.mixture_weights) if cfg.mixture_weights is not None
                   else rng.dirichlet(prior))
        progress = dict.fromkeys(topic_ids, 0)
        ts = base_ms + int(rng.integers(0, 30 * 86_400_000))
        interactions = []
        n_sessions = int(rng.integers(cfg.sessions_per_student[0], cfg.sessions_per_student[1] + 1))
        for s in range(n_sessions):
            topic = topic_ids[int(rng.integers(len(topic_ids)))]
            length = int(rng.integers(cfg.session_length[0], cfg.session_length[1] + 1))
            bank = by_topic[topic]
            for _ in range(length):
                if progress[topic] >= len(bank):
                    break
                q = bank[progress[topic]]
                progress[topic] += 1
                while True:
                    if rng.random() < cfg.guess_rate:
                        chosen = q.choices[int(rng.integers(len(q.choices)))].id
                    else:
                        rule = profiles[int(rng.choice(len(profiles), p=weights))]
                        value = RULES[rule](*operands[q.id])
                        chosen = value_to_choice[q.id].get(value)
                        if chosen is None:
                            chosen = next(iter(q.correct_choice_ids))
                    ts += int(rng.integers(10_000, 120_000))
                    correct = frozenset([chosen]) == q.correct_choice_ids
                    interactions.append(Interaction(user, f"{user}_s{s}", q.id, frozenset([chosen]),
                                                    ts, correct))
                    if correct or rng.random() >= cfg.retry_rate:
                        break
            ts += int(rng.integers(3_600_000, 7 * 86_400_000))
        if interactions:
            records.append(StudentRecord(user, interactions))
    return Corpus(questions, records, topics)


# -- JSONL ingestion -------------------------------------------------------

def _require(obj, key, kind, line, path):
    if key not in obj:
        raise IngestionError(line, key, "missing", path)
    value = obj[key]
    if kind is int and isinstance(value, bool):
        raise IngestionError(line, key, "expected integer", path)
    if not isinstance(value, kind):
        raise IngestionError(line, key, f"expected {getattr(kind, '__name__', kind)}", path)
    return value


def _id_list(obj, key, line, path):
    values = _require(obj, key, list, line, path)
    if not values or not all(isinstance(v, str) for v in values):
        raise IngestionError(line, key, "expected a non-empty list of strings", path)
    return values


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise IngestionError(lineno, "<line>", f"invalid JSON: {exc.msg}", path) from None
            if not isinstance(obj, dict):
                raise IngestionError(lineno, "<line>", "expected a JSON object", path)
            yield lineno, obj


def load_questions(path):
    questions = []
    for line, obj in _iter_jsonl(path):
        choices = []
        for i, c in enumerate(_require(obj, "choices", list, line, path)):
            if not isinstance(c, dict):
                raise IngestionError(line, f"choices[{i}]", "expected an object", path)
            choices.append((_require(c, "id", str, line, path), _require(c, "text", str, line, path)))
        try:
            questions.append(Question(
                _require(obj, "id", str, line, path), _require(obj, "topic_id", str, line, path),
                _require(obj, "text", str, line, path),
                tuple(AnswerChoice(cid, text) for cid, text in choices),
                frozenset(_id_list(obj, "correct_choice_ids", line, path))))
        except ContractError as exc:
            raise IngestionError(line, "choices", str(exc), path) from None
    return questions


def load_topics(path):
    return [Topic(_require(o, "id", str, n, path), _require(o, "name", str, n, path),
                  o.get("parent_id")) for n, o in _iter_jsonl(path)]


def load_interactions(path, questions=None):
    """Group interactions by user, ordered by timestamp.

    With ``questions`` given, references are checked and ``is_correct`` is
    recomputed (a stored value that disagrees is an ingestion error).
    """
    qmap = {q.id: q for q in questions} if questions is not None else None
    by_user = {}
    for line, obj in _iter_jsonl(path):
        user = _require(obj, "user_id", str, line, path)
        qid = _require(obj, "question_id", str, line, path)
        selected = frozenset(_id_list(obj, "selected_choice_ids", line, path))
        ts = _require(obj, "timestamp", int, line, path)
        stored = obj.get("is_correct")
        if stored is not None and not isinstance(stored, bool):
            raise IngestionError(line, "is_correct", "expected boolean", path)
        if qmap is not None:
            q = qmap.get(qid)
            if q is None:
                raise ReferentialError(f"{path}:line {line}: unknown question id {qid!r}")
            unknown = selected - set(q.choice_ids)
            if unknown:
                raise ReferentialError(f"{path}:line {line}: choice ids {sorted(unknown)} "
                                       f"are not choices of question {qid!r}")
            correct = selected == q.correct_choice_ids
            if stored is not None and stored != correct:
                raise IngestionError(line, "is_correct", "disagrees with the question's answer key", path)
        else:
            correct = bool(stored)
        it = Interaction(user, _require(obj, "session_id", str, line, path), qid, selected, ts, correct)
        by_user.setdefault(user, []).append(it)
    return [StudentRecord(u, sorted(its, key=lambda i: i.timestamp)) for u, its in by_user.items()]


def _question_json(q):
    return {"id": q.id, "topic_id": q.topic_id, "text": q.text,
            "choices": [{"id": c.id, "text": c.text} for c in q.choices],
            "correct_choice_ids": sorted(q.correct_choice_ids)}


def _interaction_json(it):
    return {"user_id": it.user_id, "session_id": it.session_id, "question_id": it.question_id,
            "selected_choice_ids": sorted(it.selected_choice_ids), "timestamp": it.timestamp,
            "is_correct": it.is_correct}


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def save_corpus(corpus, directory):
    """Write ``questions.jsonl``, ``interactions.jsonl`` and ``topics.jsonl``; return the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / f"{name}.jsonl" for name in ("questions", "interactions", "topics")}
    _write_jsonl(paths["questions"], (_question_json(q) for q in corpus.questions))
    _write_jsonl(paths["interactions"],
                 (_interaction_json(it) for r in corpus.records for it in r.interactions))
    _write_jsonl(paths["topics"], (asdict(t) for t in corpus.topics))
    return paths


def load_corpus(directory=None, questions_path=None, interactions_path=None, topics_path=None):
    if directory is not None:
        directory = Path(directory)
        questions_path = questions_path or directory / "questions.jsonl"
        interactions_path = interactions_path or directory / "interactions.jsonl"
        candidate = directory / "topics.jsonl"
        topics_path = topics_path or (candidate if candidate.exists() else None)
    questions = load_questions(questions_path)
    records = load_interactions(interactions_path, questions)
    topics = load_topics(topics_path) if topics_path else \
        [Topic(t, t) for t in dict.fromkeys(q.topic_id for q in questions)]
    return Corpus(questions, records, topics)


# -- binary decomposition ------------------------------------------------------

def decompose(questions, records, task, keep_repeat_trials=True):
    """Turn MCQs (or interactions with them) into one instance per answer choice."""
    if task not in TASKS:
        raise ContractError(f"task must be one of {TASKS}, got {task!r}")
    qmap = {q.id: q for q in questions}
    out = []
    if task == CORRECT_ANSWER:
        for q in questions:
            for c in q.choices:
                out.append(BinaryInstance(None, q.id, c.id, q.text, c.text,
                                          int(c.id in q.correct_choice_ids)))
        return out
    for rec in records:
        seen = set()
        for k, it in enumerate(rec.interactions):
            _check_interaction(it, qmap)
            if not keep_repeat_trials:
                if it.question_id in seen:
                    continue
                seen.add(it.question_id)
            q = qmap[it.question_id]
            key = f"{rec.user_id}#{k}"
            for c in q.choices:
                out.append(BinaryInstance(rec.user_id, q.id, c.id, q.text, c.text,
                                          int(c.id in it.selected_choice_ids), it.timestamp, key))
    return out


# -- splits -----------------------------------------------------------------

QUESTION_EXCLUSIVE = "question_exclusive"
STUDENT_TASK = "student_task"


@dataclass(frozen=True)
class Split:
    policy: str
    train: tuple
    val: tuple
    test: tuple
    seed: int = 0

    def __getitem__(self, name):
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def keys(self):
        return ("train", "val", "test")

    @property
    def split_id(self):
        return f"{self.policy}-seed{self.seed}"


def largest_remainder(n, ratios):
    """Integer sizes summing to ``n``, proportional to ``ratios``."""
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    total = sum(fr)
    quotas = [n * r / total for r in fr]
    sizes = [int(q) for q in quotas]
    rest = n - sum(sizes)
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def _group_split(instances, key_fn, ratios, seed, policy, min_groups, what):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise SplitError(f"ratios must be three non-negative numbers, got {ratios}")
    groups = {}
    for inst in instances:
        groups.setdefault(key_fn(inst), []).append(inst)
    keys = sorted(groups)
    if len(keys) < min_groups:
        raise SplitError(f"need at least {min_groups} {what} to split, got {len(keys)}")
    order = np.random.default_rng(seed).permutation(len(keys))
    sizes = largest_remainder(len(keys), ratios)
    bounds = np.cumsum([0] + sizes)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        chosen = {keys[i] for i in order[lo:hi]}
        parts.append(tuple(inst for inst in instances if key_fn(inst) in chosen))
    return Split(policy, *parts, seed=seed)


def split_question_exclusive(instances, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition by question id: all instances of a question land in one subset."""
    if any(inst.user_id is not None for inst in instances):
        raise ContractError("question-exclusive split expects correct_answer-task instances")
    return _group_split(instances, lambda i: i.question_id, ratios, seed,
                        QUESTION_EXCLUSIVE, 3, "questions")


def split_student_task(instances, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition by interaction: one interaction's choice instances stay together."""
    if any(inst.interaction_key is None for inst in instances):
        raise ContractError("student-task split expects student_answer-task instances")
    return _group_split(instances, lambda i: i.interaction_key, ratios, seed,
                        STUDENT_TASK, 3, "interactions")
