"""
Corpus files and in-memory corpora.

A corpus file is UTF-8 text holding one document per line. The first line is
a header "#domain:<tag>"; further header lines may appear and apply to the
documents that follow them (the multilingual generator uses this to tag each
pseudo-language as "multilingual:<lang>"). Inside a document, backslash,
newline, tab and carriage return are written as \\\\, \\n, \\t and \\r, and a
document that starts with "#" is written with a leading backslash, so that
every physical line is either a header or exactly one document.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import CORPUS_HEADER_PREFIX, EOS_ID
from .errors import ConfigError, DecodeError
from .tokenizer import tokenizer

log = logging.getLogger(__name__)

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\t": "\\t", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "n": "\n", "t": "\t", "r": "\r", "#": "#"}


def escape_document(text):
    out = "".join(_ESCAPES.get(char, char) for char in text)
    if out.startswith("#"):
        out = "\\" + out
    return out


def unescape_document(line):
    out = []
    chars = iter(line)
    for char in chars:
        if char != "\\":
            out.append(char)
            continue
        follower = next(chars, None)
        if follower not in _UNESCAPES:
            raise DecodeError(f"bad escape sequence in corpus line: {line!r}")
        out.append(_UNESCAPES[follower])
    return "".join(out)


def domain_language(tag):
    """'multilingual:lang2' -> 'lang2'; tags without a language give None"""
    if ":" not in tag:
        return None
    return tag.split(":", 1)[1]


def dataset_tag(tag):
    """'multilingual:lang2' -> 'multilingual'; other tags are returned as is"""
    return tag.split(":", 1)[0]


@dataclass
class Corpus:
    """
    Documents of one corpus, each with its own domain tag (usually all equal
    to the corpus domain).
    """

    domain: str
    documents: list
    doc_tags: list = field(default=None)

    def __post_init__(self):
        if self.doc_tags is None:
            self.doc_tags = [self.domain] * len(self.documents)
        if len(self.doc_tags) != len(self.documents):
            raise ConfigError("every document needs exactly one domain tag")
        self._stream = None

    def __len__(self):
        return len(self.documents)

    def token_stream(self):
        """
        All documents tokenized and joined, each followed by eos.

        :returns: (token ids, index of the document each token belongs to)

        """
        if self._stream is None:
            ids, owners = [], []
            for index, doc in enumerate(self.documents):
                doc_ids = tokenizer.tokenize(doc) + [EOS_ID]
                ids.extend(doc_ids)
                owners.extend([index] * len(doc_ids))
            self._stream = (
                np.asarray(ids, dtype=np.int64),
                np.asarray(owners, dtype=np.int64),
            )
        return self._stream

    def sample_window(self, length, rng):
        """
        A random contiguous window of the token stream; the whole stream when
        it is shorter than length.

        :returns: (list of token ids, domain tag of the document the window
            starts in)

        """
        ids, owners = self.token_stream()
        if ids.size == 0:
            raise ConfigError(f"corpus {self.domain!r} has no documents")
        if ids.size <= length:
            start = 0
        else:
            start = int(rng.integers(0, ids.size - length + 1))
        window = ids[start : start + length]
        return window.tolist(), self.doc_tags[owners[start]]


def read_corpus(path):
    """
    Reads a corpus file.

    :param path: path to a corpus file
    :returns: Corpus whose domain is the tag of the first header, without
        any ":<language>" suffix

    """
    documents, tags = [], []
    domain = None
    current = None
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if line.startswith(CORPUS_HEADER_PREFIX):
                current = line[len(CORPUS_HEADER_PREFIX) :].strip()
                if not current:
                    raise DecodeError(f"{path}:{line_no}: empty domain tag")
                if domain is None:
                    domain = dataset_tag(current)
                continue
            if current is None:
                raise DecodeError(
                    f"{path}: corpus files must start with a"
                    f" '{CORPUS_HEADER_PREFIX}<tag>' header"
                )
            if not line:
                continue
            documents.append(unescape_document(line))
            tags.append(current)
    if domain is None:
        raise DecodeError(f"{path}: corpus file is empty")
    log.debug("read %d documents from %s", len(documents), path)
    return Corpus(domain=domain, documents=documents, doc_tags=tags)


def write_corpus(path, corpus):
    """Writes a Corpus, emitting a header whenever the document tag changes"""
    current = None
    with open(path, "w", encoding="utf-8") as handle:
        if not corpus.documents:
            handle.write(f"{CORPUS_HEADER_PREFIX}{corpus.domain}\n")
        for doc, tag in zip(corpus.documents, corpus.doc_tags):
            if tag != current:
                handle.write(f"{CORPUS_HEADER_PREFIX}{tag}\n")
                current = tag
            handle.write(escape_document(doc) + "\n")
