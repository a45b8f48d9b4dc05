"""
This file is responsible for managing all the synthetic corpus generators that
moescope supports. If you want to add your own kind of training or evaluation
data to moescope, this is the file to edit!

A generator is called like this: generator(num_docs, rng)

where num_docs is the number of documents wanted and rng is a
numpy.random.Generator (the only source of randomness a generator may use, so
that the same seed always yields the same corpus). It must return a list of
(domain_tag, document) pairs, where document is a str. Most generators tag
every document with their own short name; a generator may use finer tags of the
form "<name>:<subgroup>" (see generate_multilingual), which the routing
analysis can group by.

Documents must not be empty. Any characters are fine: corpus files escape
newlines and tabs (see corpus.py).

The domains mimic the properties of real pre-training data that matter for
routing:
  text:          Zipfian word soup in plain lower-case English-like words
  code:          a toy programming language, dense in "\\n", "\\t" and "="
  multilingual:  four pseudo-languages whose UTF-8 bytes do not overlap
  instruct:      chat-style question/answer templates (out of the training
                 distribution, for evaluation)
  repeat:        "abab..." documents, for sanity-checking training
"""

import numpy as np

from .corpus import Corpus
from .errors import ConfigError

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_ZIPF_EXPONENT = 1.1
_TEXT_VOCAB = 400

# First code point of each pseudo-language's 16-letter alphabet. The UTF-8
# lead bytes (0xD0..0xD3) and continuation ranges (0x80, 0x90, 0xA0, 0xB0
# rows) are disjoint between languages.
_LANGUAGE_BLOCKS = {
    "lang0": 0x0400,
    "lang1": 0x0450,
    "lang2": 0x04A0,
    "lang3": 0x04F0,
}


def _word_list(rng, size, alphabet, min_len=2, max_len=8):
    words = set()
    while len(words) < size:
        length = int(rng.integers(min_len, max_len + 1))
        words.add("".join(rng.choice(list(alphabet), size=length)))
    # Sorted first so the ranking does not depend on set iteration order
    words = sorted(words)
    rng.shuffle(words)
    return words


def _zipf_probs(size):
    weights = 1.0 / np.arange(1, size + 1) ** _ZIPF_EXPONENT
    return weights / weights.sum()


def _sentences(rng, words, probs, num_sentences):
    sentences = []
    for _ in range(num_sentences):
        length = int(rng.integers(4, 13))
        picked = rng.choice(len(words), size=length, p=probs)
        sentence = " ".join(words[i] for i in picked)
        sentences.append(sentence[0].upper() + sentence[1:] + ".")
    return " ".join(sentences)


def generate_text(num_docs, rng):
    words = _word_list(rng, _TEXT_VOCAB, _LETTERS)
    probs = _zipf_probs(len(words))
    return [
        ("text", _sentences(rng, words, probs, int(rng.integers(2, 6))))
        for _ in range(num_docs)
    ]


def _code_line(rng, names, depth):
    indent = "\t" * depth
    left = names[int(rng.integers(len(names)))]
    right = names[int(rng.integers(len(names)))]
    kind = int(rng.integers(4))
    if kind == 0:
        return f"{indent}{left} = {right} + {int(rng.integers(100))}"
    if kind == 1:
        return f"{indent}{left} = {right}"
    if kind == 2:
        return f"{indent}{left} == {right}"
    return f"{indent}{left}[{int(rng.integers(10))}] = {right}"


def generate_code(num_docs, rng):
    names = _word_list(rng, 40, _LETTERS, 1, 5)
    docs = []
    for _ in range(num_docs):
        lines = []
        for _ in range(int(rng.integers(1, 4))):
            func = names[int(rng.integers(len(names)))]
            args = ", ".join(
                rng.choice(names, size=int(rng.integers(1, 4)), replace=False)
            )
            lines.append(f"def {func}({args}):")
            for _ in range(int(rng.integers(2, 7))):
                lines.append(_code_line(rng, names, int(rng.integers(1, 3))))
            lines.append(f"\treturn {names[int(rng.integers(len(names)))]}")
            lines.append("")
        docs.append(("code", "\n".join(lines)))
    return docs


def generate_multilingual(num_docs, rng):
    languages = sorted(_LANGUAGE_BLOCKS)
    vocabularies = {
        lang: _word_list(
            rng,
            120,
            [chr(_LANGUAGE_BLOCKS[lang] + i) for i in range(16)],
            2,
            6,
        )
        for lang in languages
    }
    docs = []
    for _ in range(num_docs):
        lang = languages[int(rng.integers(len(languages)))]
        words = vocabularies[lang]
        length = int(rng.integers(20, 60))
        picked = rng.choice(len(words), size=length, p=_zipf_probs(len(words)))
        docs.append(
            (f"multilingual:{lang}", " ".join(words[i] for i in picked))
        )
    return docs


_INSTRUCT_QUESTIONS = [
    "What is the capital of {}?",
    "Can you explain how {} works?",
    "Please write a short poem about {}.",
    "Why do people like {}?",
    "Give me three facts about {}.",
]
_INSTRUCT_ANSWERS = [
    "Sure! Here is what I know about {}.",
    "Great question. {} is a topic many people ask about.",
    "Of course. Let me tell you about {}.",
]
_INSTRUCT_TOPICS = [
    "France",
    "the moon",
    "photosynthesis",
    "chess",
    "volcanoes",
    "jazz music",
    "the ocean",
    "bicycles",
]


def generate_instruct(num_docs, rng):
    docs = []
    for _ in range(num_docs):
        turns = []
        for _ in range(int(rng.integers(1, 4))):
            topic = _INSTRUCT_TOPICS[int(rng.integers(len(_INSTRUCT_TOPICS)))]
            question = _INSTRUCT_QUESTIONS[
                int(rng.integers(len(_INSTRUCT_QUESTIONS)))
            ]
            answer = _INSTRUCT_ANSWERS[
                int(rng.integers(len(_INSTRUCT_ANSWERS)))
            ]
            turns.append(f"User: {question.format(topic)}")
            turns.append(f"Assistant: {answer.format(topic)}")
        docs.append(("instruct", "\n".join(turns)))
    return docs


def generate_repeat(num_docs, rng):
    return [
        ("repeat", "ab" * int(rng.integers(32, 129))) for _ in range(num_docs)
    ]


# Give your generator a short name (it becomes the domain tag):
corpus_generators_supported_short = [
    "text",
    "code",
    "multilingual",
    "instruct",
    "repeat",
]

# Give it a long name:
corpus_generators_supported_long = [
    "Zipfian English-like text",
    "Toy source code",
    "Multilingual text in four byte-disjoint pseudo-languages",
    "Chat-style instructions (out of distribution)",
    "Two-symbol repeating text",
]

# Map the short name to the generator function
corpus_generator_functions = {
    "text": generate_text,
    "code": generate_code,
    "multilingual": generate_multilingual,
    "instruct": generate_instruct,
    "repeat": generate_repeat,
}


def generate_corpus(domain, num_docs, rng):
    """
    Runs the named generator and wraps its output as a Corpus.

    :param domain: short name of a generator
    :param num_docs: number of documents
    :param rng: numpy.random.Generator

    """
    if domain not in corpus_generator_functions:
        raise ConfigError(
            f"unknown corpus domain {domain!r}; expected one of"
            f" {', '.join(corpus_generators_supported_short)}"
        )
    pairs = corpus_generator_functions[domain](num_docs, rng)
    return Corpus(
        domain=domain,
        documents=[doc for _, doc in pairs],
        doc_tags=[tag for tag, _ in pairs],
    )
