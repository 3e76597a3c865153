#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_data.py                                                      #
#                                                                             #
# PURPOSE:  Deterministic generation of the toy pretraining corpus, the       #
#           natural-language evaluation suite and the four vision-language    #
#           tasks, plus their line-delimited persistence.                     #
#                                                                             #
# REQUIRED: Requires numpy.                                                   #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  Vocabulary           ... token ids, special ids and symbol table           #
#  Grammar              ... word classes and cloze targets of the corpus      #
#  SceneSpec            ... objects and optional glyph of a synthetic image   #
#  SyntheticImage       ... P x F patch-feature matrix + its SceneSpec        #
#  Sample               ... prompt, target, loss mask, optional image         #
#  TaskDataset          ... train/test splits of one task                     #
#  DataBundle           ... every dataset of an experiment                    #
#  build_vocabulary     ... fixed-layout vocabulary with seeded word forms    #
#  build_grammar        ... seeded word classes for the pretraining grammar   #
#  generate_pretrain_corpus ... text-only sentences (task 1)                  #
#  generate_nl_eval_suite   ... 1 cloze (NLG) + 4 multiple-choice (NLU) sets  #
#  render_scene         ... SceneSpec -> patch features with bounded noise    #
#  generate_vl_task     ... caption_instruct / vqa / ocr / refgrounding       #
#  solve_from_scene     ... lookup-table answer from the scene provenance     #
#  sample_digest        ... content hash of a sample                          #
#  generate_datasets    ... all datasets for a run configuration              #
#  save_datasets        ... write datasets + manifest to a directory          #
#  load_datasets        ... read datasets back, checking the manifest         #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import json
import math
import time
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from tqdm.auto import tqdm

from CLutils.util_config import data_hash
from CLutils.util_misc import (
    ConfigError,
    canonical_json,
    read_json,
    seeded_rng,
    sha256_hex,
    write_json,
)

PAD_ID, BOS_ID, EOS_ID, IMG_ID, SEP_ID = 0, 1, 2, 3, 4
SPECIAL_SYMBOLS = ("<pad>", "<bos>", "<eos>", "<img>", "<sep>")

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
QUADRANTS = ("nw", "ne", "sw", "se")
COMMAND_WORDS = (
    "describe",
    "what",
    "color",
    "shape",
    "at",
    "read",
    "glyph",
    "where",
    "is",
    "the",
    "and",
)
VL_WORDS = SHAPES + COLORS + QUADRANTS + COMMAND_WORDS
GLYPH_BASE = len(SPECIAL_SYMBOLS) + len(VL_WORDS)
MAX_GLYPHS = 16
MIN_VOCAB_SIZE = 64
N_WORD_CLASSES = 4

# Object features per patch: one-hot shape, one-hot color, presence flag.
SHAPE_OFFSET = 0
COLOR_OFFSET = len(SHAPES)
PRESENCE_FEATURE = len(SHAPES) + len(COLORS)
MIN_PATCH_DIM = PRESENCE_FEATURE + 1

VL_TASK_ORDER = ("caption_instruct", "vqa", "ocr", "refgrounding")
TASK_IDS = {
    "pretrain": 1,
    "nl_eval": 1,
    "caption_instruct": 2,
    "vl_mixture": 2,
    "vqa": 3,
    "ocr": 4,
    "refgrounding": 5,
}
GENERATIVE = "generative_exact_match"
MULTIPLE_CHOICE = "multiple_choice"
NL_SUITE_NAMES = ("cloze", "agreement", "adjective", "coreference", "plausibility")
MAX_DRAWS_PER_ITEM = 64
FORMAT_VERSION = 1


class Vocabulary(NamedTuple):
    """Token ids and their surface forms"""

    size: int
    """Number of token ids N"""
    seed: int
    """Seed of the word forms and of the grammar built on them"""
    symbols: Tuple[str, ...]
    """Surface string of every id"""
    categories: Dict[str, Tuple[int, ...]]
    """Token ids of each word category"""

    @property
    def pad(self):
        return PAD_ID

    @property
    def bos(self):
        return BOS_ID

    @property
    def eos(self):
        return EOS_ID

    @property
    def img(self):
        return IMG_ID

    @property
    def sep(self):
        return SEP_ID

    def id(self, symbol):
        """Token id of a fixed vision-language word or special symbol."""
        if symbol in SPECIAL_SYMBOLS:
            return SPECIAL_SYMBOLS.index(symbol)
        if symbol in VL_WORDS:
            return len(SPECIAL_SYMBOLS) + VL_WORDS.index(symbol)
        return self.symbols.index(symbol)

    def decode(self, ids):
        return " ".join(self.symbols[i] for i in ids)


class Grammar(NamedTuple):
    """Word classes of the pretraining grammar"""

    noun_class: Dict[int, int]
    verbs_by_class: Tuple[Tuple[int, ...], ...]
    adjs_by_class: Tuple[Tuple[int, ...], ...]
    nouns_by_class: Tuple[Tuple[int, ...], ...]
    home: Dict[int, int]
    """Place that closes every sentence about a subject noun"""
    at: int
    the: int


class SceneSpec(NamedTuple):
    """Objects in a synthetic image"""

    objects: Tuple[Tuple[str, str, str], ...]
    """(shape, color, quadrant) triples, at most one per quadrant"""
    glyph: Optional[int] = None
    """Token id rendered into the glyph region"""

    def validate(self):
        quadrants = [quad for _, _, quad in self.objects]
        if len(set(quadrants)) != len(quadrants):
            raise ValueError("scene has two objects in one quadrant")
        for shape, color, quad in self.objects:
            if shape not in SHAPES or color not in COLORS or quad not in QUADRANTS:
                raise ValueError(f"unknown object ({shape}, {color}, {quad})")
        if self.glyph is not None and not GLYPH_BASE <= self.glyph < GLYPH_BASE + MAX_GLYPHS:
            raise ValueError(f"glyph id {self.glyph} is not a glyph token")
        return self


class SyntheticImage(NamedTuple):
    """Patch features standing in for an image"""

    patches: np.ndarray
    """P x F matrix"""
    provenance: SceneSpec
    """The scene that was rendered"""


class Sample(NamedTuple):
    """One training or evaluation example"""

    prompt: Tuple[int, ...]
    target: Tuple[int, ...]
    loss_mask: Tuple[bool, ...]
    image: Optional[SyntheticImage] = None
    task_id: int = 1
    candidates: Optional[Tuple[Tuple[int, ...], ...]] = None
    """Completions of a multiple-choice sample"""
    answer_index: Optional[int] = None
    """Index of the correct completion"""


class TaskDataset(NamedTuple):
    """A generated task"""

    task_id: int
    kind: str
    name: str
    train: Tuple[Sample, ...]
    test: Tuple[Sample, ...]
    mode: str
    """generative_exact_match or multiple_choice"""
    tag: str
    """pretrain, VL, NLG or NLU"""
    alignment: Tuple[Sample, ...] = ()
    """Caption samples for the alignment stage (caption_instruct only)"""


class DataBundle(NamedTuple):
    """Every dataset of an experiment"""

    vocab: Vocabulary
    pretrain: TaskDataset
    nl_suite: Tuple[TaskDataset, ...]
    vl_tasks: Tuple[TaskDataset, ...]
    """In task order: caption_instruct, vqa, ocr, refgrounding"""
    data_hash: str = ""


# -----------------------------------------------------------------------------#
def _category_sizes(size):
    n_glyph = MAX_GLYPHS if size >= 128 else MAX_GLYPHS // 2
    rest = size - GLYPH_BASE - n_glyph
    n_noun = (rest * 2 // 5) // N_WORD_CLASSES * N_WORD_CLASSES
    n_verb = (rest // 5) // N_WORD_CLASSES * N_WORD_CLASSES
    n_adj = n_verb
    n_place = rest - n_noun - n_verb - n_adj
    return (
        ("glyph", n_glyph),
        ("noun", n_noun),
        ("verb", n_verb),
        ("adj", n_adj),
        ("place", n_place),
    )


def _pseudo_words(rng, count, taken):
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    words = []
    while len(words) < count:
        n_syllables = int(rng.integers(2, 4))
        word = "".join(
            consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
            for _ in range(n_syllables)
        )
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def build_vocabulary(seed, size=256):
    """Build the vocabulary.

    Layout: the five special ids, the vision-language words, the glyph pool,
    then nouns, verbs, adjectives and places of the pretraining grammar. The
    grammar words get seeded pseudo-word surface forms.

    Args:
        seed (int): Seed of the surface forms and the grammar.
        size (int): Vocabulary size N.

    Returns:
        Vocabulary
    """
    if size < MIN_VOCAB_SIZE:
        raise ValueError(
            f"vocabulary too small: N={size}, the layout needs at least {MIN_VOCAB_SIZE}"
        )
    symbols = list(SPECIAL_SYMBOLS) + list(VL_WORDS)
    categories = {
        "special": tuple(range(len(SPECIAL_SYMBOLS))),
        "shape": tuple(len(SPECIAL_SYMBOLS) + VL_WORDS.index(s) for s in SHAPES),
        "color": tuple(len(SPECIAL_SYMBOLS) + VL_WORDS.index(c) for c in COLORS),
        "quadrant": tuple(len(SPECIAL_SYMBOLS) + VL_WORDS.index(q) for q in QUADRANTS),
        "command": tuple(
            len(SPECIAL_SYMBOLS) + VL_WORDS.index(w) for w in COMMAND_WORDS
        ),
    }
    rng = seeded_rng(seed, 0)
    taken = set(symbols)
    for name, count in _category_sizes(size):
        start = len(symbols)
        if name == "glyph":
            symbols += [f"glyph_{i:02d}" for i in range(count)]
        else:
            symbols += _pseudo_words(rng, count, taken)
        categories[name] = tuple(range(start, start + count))
    return Vocabulary(
        size=size, seed=int(seed), symbols=tuple(symbols), categories=categories
    )


def build_grammar(vocab):
    """Seeded word classes and cloze targets of the pretraining grammar.

    Every noun, verb and adjective belongs to one of four classes. A subject
    noun takes a verb of its own class, an adjective agrees with the class of
    the noun it precedes, and a sentence closes with 'at' followed by the
    subject's home place.
    """
    rng = seeded_rng(vocab.seed, 1)
    cats = vocab.categories

    def split_classes(ids):
        ids = [int(i) for i in rng.permutation(ids)]
        return tuple(tuple(sorted(ids[c::N_WORD_CLASSES])) for c in range(N_WORD_CLASSES))

    nouns_by_class = split_classes(cats["noun"])
    verbs_by_class = split_classes(cats["verb"])
    adjs_by_class = split_classes(cats["adj"])
    noun_class = {n: c for c, nouns in enumerate(nouns_by_class) for n in nouns}
    places = cats["place"]
    home = {n: int(places[rng.integers(len(places))]) for n in cats["noun"]}
    return Grammar(
        noun_class=noun_class,
        verbs_by_class=verbs_by_class,
        adjs_by_class=adjs_by_class,
        nouns_by_class=nouns_by_class,
        home=home,
        at=vocab.id("at"),
        the=vocab.id("the"),
    )


class _Sentence(NamedTuple):
    subject: int
    verb: int
    prefix: Tuple[int, ...]
    adjective: int
    obj: int
    place: int

    def tokens(self, grammar):
        return (self.subject, self.verb) + self.prefix + (
            self.adjective,
            self.obj,
            grammar.at,
            self.place,
        )


def _choice(rng, seq):
    return int(seq[rng.integers(len(seq))])


def _sample_sentence(grammar, rng):
    nouns = sorted(grammar.noun_class)
    subject = _choice(rng, nouns)
    verb = _choice(rng, grammar.verbs_by_class[grammar.noun_class[subject]])
    obj = _choice(rng, nouns)
    adjs = grammar.adjs_by_class[grammar.noun_class[obj]]
    prefix = ()
    if rng.random() < 0.5:
        prefix += (grammar.the,)
    if rng.random() < 0.3:
        prefix += (_choice(rng, adjs),)
    adjective = _choice(rng, adjs)
    return _Sentence(subject, verb, prefix, adjective, obj, grammar.home[subject])


def _text_sample(tokens, task_id=1):
    return Sample(
        prompt=(),
        target=tuple(tokens),
        loss_mask=(True,) * len(tokens),
        task_id=task_id,
    )


def generate_pretrain_corpus(vocab, seed, size):
    """Text-only sentences of the probabilistic grammar, each closed by EOS.

    Args:
        vocab (Vocabulary): Vocabulary of the run.
        seed (int): Corpus seed.
        size (int): Number of sentences.

    Returns:
        TaskDataset with kind 'pretrain' and task id 1.
    """
    if size < 1:
        raise ValueError("corpus size must be >= 1")
    grammar = build_grammar(vocab)
    rng = seeded_rng(seed, 1, 0)
    samples = tuple(
        _text_sample(_sample_sentence(grammar, rng).tokens(grammar) + (EOS_ID,))
        for _ in range(size)
    )
    return TaskDataset(
        task_id=1,
        kind="pretrain",
        name="pretrain",
        train=samples,
        test=(),
        mode=GENERATIVE,
        tag="pretrain",
    )


# -----------------------------------------------------------------------------#
def _choice_sample(rng, prompt, correct, distractors):
    candidates = [tuple(correct)] + [tuple(d) for d in distractors]
    order = rng.permutation(len(candidates))
    candidates = tuple(candidates[i] for i in order)
    answer = int(np.flatnonzero(order == 0)[0])
    return Sample(
        prompt=tuple(prompt),
        target=candidates[answer],
        loss_mask=(True,) * len(candidates[answer]),
        task_id=1,
        candidates=candidates,
        answer_index=answer,
    )


def _other_class_words(rng, by_class, cls, count):
    others = [c for c in range(N_WORD_CLASSES) if c != cls]
    picked = rng.choice(others, size=count, replace=False)
    return [_choice(rng, by_class[c]) for c in picked]


def _nl_item(name, grammar, rng):
    sent = _sample_sentence(grammar, rng)
    cls = grammar.noun_class
    if name == "cloze":
        tokens = sent.tokens(grammar)
        return Sample(prompt=tokens[:-1], target=tokens[-1:], loss_mask=(True,))
    if name == "agreement":
        wrong = _other_class_words(rng, grammar.verbs_by_class, cls[sent.subject], 3)
        return _choice_sample(rng, (sent.subject,), (sent.verb,), [(w,) for w in wrong])
    if name == "adjective":
        adj_class = cls[sent.obj]
        wrong = _other_class_words(rng, grammar.nouns_by_class, adj_class, 3)
        prompt = (sent.subject, sent.verb, sent.adjective)
        return _choice_sample(rng, prompt, (sent.obj,), [(w,) for w in wrong])
    if name == "coreference":
        decoys = [n for n in sorted(cls) if grammar.home[n] != sent.place]
        obj = _choice(rng, decoys)
        adjective = _choice(rng, grammar.adjs_by_class[cls[obj]])
        sent = sent._replace(obj=obj, adjective=adjective)
        prompt = sent.tokens(grammar)[:-1]
        return _choice_sample(rng, prompt, (sent.place,), [(grammar.home[obj],)])
    if name == "plausibility":
        (wrong,) = _other_class_words(rng, grammar.nouns_by_class, cls[sent.obj], 1)
        prompt = (sent.subject, sent.verb)
        return _choice_sample(
            rng, prompt, (sent.adjective, sent.obj), [(sent.adjective, wrong)]
        )
    raise ValueError(f"unknown NL evaluation set '{name}'")


def _nl_samples(name, grammar, rng, size, exclude=frozenset()):
    samples = []
    for _ in range(size * MAX_DRAWS_PER_ITEM):
        if len(samples) == size:
            break
        sample = _nl_item(name, grammar, rng)
        if exclude:
            sentence = sample.prompt + sample.target + (EOS_ID,)
            if sample_digest(_text_sample(sentence)) in exclude:
                continue
        samples.append(sample)
    else:
        raise ValueError(
            f"could not draw {size} '{name}' items outside the pretraining corpus"
        )
    return tuple(samples)


def generate_nl_eval_suite(vocab, seed, size=256, exclude=frozenset()):
    """The natural-language evaluation suite of the base LM (task 1).

    cloze         ... NLG, predict the place closing a sentence
    agreement     ... NLU, 4-way, verb agreeing with the subject's class
    adjective     ... NLU, 4-way, noun agreeing with the preceding adjective
    coreference   ... NLU, 2-way, the subject's home vs the object's home
    plausibility  ... NLU, 2-way, agreeing vs clashing adjective-noun phrase

    Items whose prompt and correct answer spell a sentence with its digest in
    exclude (the sample_digest of the pretraining corpus) are redrawn.

    Returns:
        list of 5 TaskDataset objects, test split only.
    """
    grammar = build_grammar(vocab)
    suite = []
    for k, name in enumerate(NL_SUITE_NAMES):
        rng = seeded_rng(seed, 1, 10 + k)
        samples = _nl_samples(name, grammar, rng, size, exclude)
        suite.append(
            TaskDataset(
                task_id=1,
                kind="nl_eval",
                name=name,
                train=(),
                test=samples,
                mode=GENERATIVE if name == "cloze" else MULTIPLE_CHOICE,
                tag="NLG" if name == "cloze" else "NLU",
            )
        )
    return suite


# -----------------------------------------------------------------------------#
def patch_layout(n_patches, patch_dim):
    """Patches per quadrant and the first glyph patch for a P x F image."""
    if patch_dim < MIN_PATCH_DIM:
        raise ConfigError(f"patch_dim must be >= {MIN_PATCH_DIM} to encode objects")
    glyph_patches = math.ceil(MAX_GLYPHS / patch_dim)
    per_quadrant = (n_patches - glyph_patches) // len(QUADRANTS)
    if per_quadrant < 1:
        raise ConfigError(
            f"n_patches={n_patches} too small for 4 quadrants + {glyph_patches} glyph patches"
        )
    return per_quadrant, per_quadrant * len(QUADRANTS)


def render_scene(scene, seed, n_patches=16, patch_dim=8, sigma=0.05):
    """Render a scene as a P x F patch-feature matrix.

    The quadrant selects a block of patches, the object's shape and color are
    one-hot features of those patches, and the glyph is a one-hot position in
    the glyph patches. Uniform noise in [-sigma, sigma] is added.
    """
    scene.validate()
    per_quadrant, glyph_start = patch_layout(n_patches, patch_dim)
    patches = np.zeros((n_patches, patch_dim))
    for shape, color, quad in scene.objects:
        rows = slice(
            QUADRANTS.index(quad) * per_quadrant,
            (QUADRANTS.index(quad) + 1) * per_quadrant,
        )
        patches[rows, SHAPE_OFFSET + SHAPES.index(shape)] = 1.0
        patches[rows, COLOR_OFFSET + COLORS.index(color)] = 1.0
        patches[rows, PRESENCE_FEATURE] = 1.0
    if scene.glyph is not None:
        slot = scene.glyph - GLYPH_BASE
        patches[glyph_start + slot // patch_dim, slot % patch_dim] = 1.0
    noise = seeded_rng(seed).uniform(-sigma, sigma, size=patches.shape)
    return SyntheticImage(patches=patches + noise, provenance=scene)


def _sample_scene(rng, glyphs):
    n_objects = int(rng.integers(1, len(SHAPES) + 1))
    quads = sorted(rng.choice(len(QUADRANTS), size=n_objects, replace=False))
    shapes = rng.choice(len(SHAPES), size=n_objects, replace=False)
    colors = rng.integers(0, len(COLORS), size=n_objects)
    objects = tuple(
        (SHAPES[s], COLORS[c], QUADRANTS[q]) for q, s, c in zip(quads, shapes, colors)
    )
    return SceneSpec(objects=objects, glyph=_choice(rng, glyphs))


def caption_tokens(scene, vocab):
    """Caption: '<color> <shape> at <quadrant>' per object, joined by 'and'."""
    tokens = []
    for shape, color, quad in scene.objects:
        if tokens:
            tokens.append(vocab.id("and"))
        tokens += [vocab.id(color), vocab.id(shape), vocab.id("at"), vocab.id(quad)]
    return tuple(tokens)


def _vl_prompt_target(kind, scene, vocab, rng):
    w = vocab.id
    if kind == "align":
        return (IMG_ID,), caption_tokens(scene, vocab)
    if kind == "caption_instruct":
        return (IMG_ID, w("describe")), caption_tokens(scene, vocab)
    if kind == "vqa":
        shape, color, quad = scene.objects[rng.integers(len(scene.objects))]
        if rng.random() < 0.5:
            return (IMG_ID, w("what"), w("color"), w("at"), w(quad)), (w(color),)
        return (IMG_ID, w("what"), w("shape"), w("at"), w(quad)), (w(shape),)
    if kind == "ocr":
        return (IMG_ID, w("read"), w("glyph")), (scene.glyph,)
    if kind == "refgrounding":
        shape, _, quad = scene.objects[rng.integers(len(scene.objects))]
        return (IMG_ID, w("where"), w("is"), w("the"), w(shape)), (w(quad),)
    raise ValueError(f"unknown vision-language task kind '{kind}'")


def solve_from_scene(sample, vocab):
    """Answer a vision-language sample by table lookup on its SceneSpec."""
    scene = sample.image.provenance
    words = [vocab.symbols[t] for t in sample.prompt[1:]]
    if not words or words[0] == "describe":
        return caption_tokens(scene, vocab)
    if words[0] == "read":
        return (scene.glyph,)
    if words[0] == "what":
        attribute, quad = words[1], words[3]
        for shape, color, where in scene.objects:
            if where == quad:
                return (vocab.id(color if attribute == "color" else shape),)
    if words[0] == "where":
        for shape, _, quad in scene.objects:
            if shape == words[3]:
                return (vocab.id(quad),)
    raise ValueError(f"sample not answerable from its scene: {' '.join(words)}")


def sample_digest(sample):
    """Content hash of a sample (tokens, candidates and patch bytes)."""
    text = canonical_json(
        {
            "prompt": sample.prompt,
            "target": sample.target,
            "candidates": sample.candidates,
        }
    )
    digest = sha256_hex(text)
    if sample.image is not None:
        digest = sha256_hex(
            digest.encode() + np.ascontiguousarray(sample.image.patches).tobytes()
        )
    return digest


def _vl_samples(kind, task_id, vocab, rng, size, geometry, exclude=frozenset()):
    glyphs = vocab.categories["glyph"]
    samples = []
    while len(samples) < size:
        scene = _sample_scene(rng, glyphs)
        image = render_scene(scene, int(rng.integers(2**31)), *geometry)
        prompt, target = _vl_prompt_target(kind, scene, vocab, rng)
        sample = Sample(
            prompt=prompt,
            target=target,
            loss_mask=(True,) * len(target),
            image=image,
            task_id=task_id,
        )
        if exclude and sample_digest(sample) in exclude:
            continue
        samples.append(sample)
    return tuple(samples)


def generate_vl_task(
    kind,
    vocab,
    seed,
    size,
    n_test=256,
    n_align=None,
    n_patches=16,
    patch_dim=8,
    noise_sigma=0.05,
):
    """Generate one vision-language task.

    Args:
        kind (str): caption_instruct, vqa, ocr or refgrounding.
        vocab (Vocabulary): Vocabulary of the run.
        seed (int): Task seed; train, test and alignment use separate streams.
        size (int): Train split size.

    Kwargs:
        n_test (int): Test split size.
        n_align (int): Alignment subset size for caption_instruct [size].
        n_patches, patch_dim (int): Image geometry P x F.
        noise_sigma (float): Patch noise amplitude.

    Returns:
        TaskDataset
    """
    if kind not in VL_TASK_ORDER:
        raise ValueError(f"unknown vision-language task kind '{kind}'")
    task_id = TASK_IDS[kind]
    geometry = (n_patches, patch_dim, noise_sigma)
    train = _vl_samples(kind, task_id, vocab, seeded_rng(seed, task_id, 0), size, geometry)
    alignment = ()
    if kind == "caption_instruct":
        alignment = _vl_samples(
            "align",
            task_id,
            vocab,
            seeded_rng(seed, task_id, 2),
            size if n_align is None else n_align,
            geometry,
        )
    seen = frozenset(sample_digest(s) for s in train + alignment)
    test = _vl_samples(
        kind, task_id, vocab, seeded_rng(seed, task_id, 1), n_test, geometry, seen
    )
    return TaskDataset(
        task_id=task_id,
        kind=kind,
        name=kind,
        train=train,
        test=test,
        mode=GENERATIVE,
        tag="VL",
        alignment=alignment,
    )


def generate_datasets(cfg, verbose=False, log=print):
    """Generate every dataset described by a RunConfig.

    The corpus, vocabulary and VL tasks use seeds.data; the NL evaluation
    suite uses seeds.eval. No NL item completes to a corpus sentence.
    """
    model, data, seed = cfg.model, cfg.data, cfg.seeds.data
    vocab = build_vocabulary(seed, model.vocab_size)
    if verbose:
        log(f"> Generating pretraining corpus ({data.n_pretrain} sentences).")
    pretrain = generate_pretrain_corpus(vocab, seed, data.n_pretrain)
    seen = frozenset(sample_digest(s) for s in pretrain.train)
    nl_suite = tuple(
        generate_nl_eval_suite(vocab, cfg.seeds.eval, data.n_nl_test, exclude=seen)
    )
    vl_tasks = tuple(
        generate_vl_task(
            kind,
            vocab,
            seed,
            data.n_vl_train,
            n_test=data.n_vl_test,
            n_align=data.n_align,
            n_patches=model.n_patches,
            patch_dim=model.patch_dim,
            noise_sigma=data.noise_sigma,
        )
        for kind in tqdm(VL_TASK_ORDER, desc="VL tasks", disable=not verbose)
    )
    return DataBundle(
        vocab=vocab,
        pretrain=pretrain,
        nl_suite=nl_suite,
        vl_tasks=vl_tasks,
        data_hash=data_hash(cfg),
    )


# -----------------------------------------------------------------------------#
def sample_to_record(sample, kind, split):
    """Line-delimited record of one sample."""
    record = {
        "task_id": sample.task_id,
        "kind": kind,
        "split": split,
        "prompt_ids": list(sample.prompt),
        "target_ids": list(sample.target),
        "loss_mask": list(sample.loss_mask),
        "patches": None,
        "candidates": None,
    }
    if sample.image is not None:
        scene = sample.image.provenance
        record["patches"] = sample.image.patches.ravel().tolist()
        record["scene"] = {"objects": [list(o) for o in scene.objects], "glyph": scene.glyph}
    if sample.candidates is not None:
        record["candidates"] = [list(c) for c in sample.candidates]
        record["answer_index"] = sample.answer_index
    return record


def record_to_sample(record, n_patches, patch_dim):
    """Inverse of sample_to_record."""
    image = None
    if record.get("patches") is not None:
        scene = SceneSpec(
            objects=tuple(tuple(o) for o in record["scene"]["objects"]),
            glyph=record["scene"]["glyph"],
        )
        patches = np.asarray(record["patches"], dtype=np.float64)
        image = SyntheticImage(patches.reshape(n_patches, patch_dim), scene)
    candidates = record.get("candidates")
    return Sample(
        prompt=tuple(record["prompt_ids"]),
        target=tuple(record["target_ids"]),
        loss_mask=tuple(bool(m) for m in record["loss_mask"]),
        image=image,
        task_id=record["task_id"],
        candidates=None if candidates is None else tuple(tuple(c) for c in candidates),
        answer_index=record.get("answer_index"),
    )


def _dataset_splits(dataset):
    return (("train", dataset.train), ("test", dataset.test), ("align", dataset.alignment))


def manifest_hash(manifest):
    """Hash of a manifest, ignoring its creation time."""
    content = {k: v for k, v in manifest.items() if k not in ("created", "manifest_hash")}
    return sha256_hex(canonical_json(content))


def save_datasets(bundle, out_dir, generator_config, verbose=False, log=print):
    """Write every dataset as <name>.<split>.jsonl plus vocab.json and
    manifest.json. Returns the manifest dictionary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = bundle.vocab
    write_json(out_dir / "vocab.json", vocab._asdict())
    files = {"vocab.json": sha256_hex((out_dir / "vocab.json").read_bytes())}
    datasets = (bundle.pretrain,) + bundle.nl_suite + bundle.vl_tasks
    index = []
    for dataset in tqdm(datasets, desc="Writing datasets", disable=not verbose):
        entry = {
            "name": dataset.name,
            "kind": dataset.kind,
            "task_id": dataset.task_id,
            "mode": dataset.mode,
            "tag": dataset.tag,
            "splits": {},
        }
        for split, samples in _dataset_splits(dataset):
            if not samples:
                continue
            fname = f"{dataset.name}.{split}.jsonl"
            with open(out_dir / fname, "w") as f:
                for sample in samples:
                    record = sample_to_record(sample, dataset.kind, split)
                    f.write(json.dumps(record, sort_keys=True))
                    f.write("\n")
            files[fname] = sha256_hex((out_dir / fname).read_bytes())
            entry["splits"][split] = fname
        index.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "data_hash": bundle.data_hash,
        "generator": generator_config,
        "datasets": index,
        "files": files,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest["manifest_hash"] = manifest_hash(manifest)
    write_json(out_dir / "manifest.json", manifest)
    if verbose:
        log(f"> Wrote {len(datasets)} datasets to {out_dir}.")
    return manifest


def load_datasets(data_dir, expected_hash=None):
    """Read a dataset directory written by save_datasets.

    Raises ConfigError if expected_hash is given and does not match the
    manifest, or if a file's content hash differs from the manifest.
    """
    data_dir = Path(data_dir)
    manifest = read_json(data_dir / "manifest.json")
    if expected_hash is not None and manifest["data_hash"] != expected_hash:
        raise ConfigError(
            f"dataset manifest in {data_dir} was generated from a different "
            f"configuration (data hash {manifest['data_hash'][:12]} != {expected_hash[:12]})"
        )
    for fname, digest in manifest["files"].items():
        if sha256_hex((data_dir / fname).read_bytes()) != digest:
            raise ConfigError(f"dataset file {fname} does not match its manifest entry")
    raw = read_json(data_dir / "vocab.json")
    vocab = Vocabulary(
        size=raw["size"],
        seed=raw["seed"],
        symbols=tuple(raw["symbols"]),
        categories={k: tuple(v) for k, v in raw["categories"].items()},
    )
    geometry = manifest["generator"]["n_patches"], manifest["generator"]["patch_dim"]
    loaded = []
    for entry in manifest["datasets"]:
        splits = {}
        for split, fname in entry["splits"].items():
            with open(data_dir / fname) as f:
                splits[split] = tuple(
                    record_to_sample(json.loads(line), *geometry) for line in f if line.strip()
                )
        loaded.append(
            TaskDataset(
                task_id=entry["task_id"],
                kind=entry["kind"],
                name=entry["name"],
                train=splits.get("train", ()),
                test=splits.get("test", ()),
                mode=entry["mode"],
                tag=entry["tag"],
                alignment=splits.get("align", ()),
            )
        )
    by_kind = {d.kind: d for d in loaded if d.kind in VL_TASK_ORDER}
    return DataBundle(
        vocab=vocab,
        pretrain=next(d for d in loaded if d.kind == "pretrain"),
        nl_suite=tuple(d for d in loaded if d.kind == "nl_eval"),
        vl_tasks=tuple(by_kind[k] for k in VL_TASK_ORDER),
        data_hash=manifest["data_hash"],
    )
