"""
Synthetic translation tasks and parallel-corpus handling
Generates deterministic reversal/copy corpora, reads and writes TSV corpora,
and batches sentence pairs with padding
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from service.errors import DataError, ParseError, UsageError
from service.tensor import RngStreams

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

SPLITS = ("train", "dev", "test")
SRC_VOCAB_NAME = "src.vocab"
TGT_VOCAB_NAME = "tgt.vocab"

Sentence = Tuple[int, ...]
Pair = Tuple[Sentence, Sentence]


class Vocab:
    """Token/id map with reserved pad=0, bos=1, eos=2, unk=3 and the rest in sorted order"""

    def __init__(self, tokens: Iterable[str]):
        content = sorted(set(tokens) - set(RESERVED_TOKENS))
        self.id_to_token: List[str] = list(RESERVED_TOKENS) + content
        self.token_to_id: Dict[str, int] = {tok: i for i, tok in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def encode(self, tokens: Sequence[str]) -> Sentence:
        return tuple(self.token_to_id.get(tok, UNK_ID) for tok in tokens)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass
class ParallelCorpus:
    """Vocabularies plus train/dev/test sentence pairs as id tuples"""

    src_vocab: Vocab
    tgt_vocab: Vocab
    train: List[Pair]
    dev: List[Pair] = field(default_factory=list)
    test: List[Pair] = field(default_factory=list)
    name: str = "corpus"

    def split(self, name: str) -> List[Pair]:
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}; expected one of {', '.join(SPLITS)}")
        return getattr(self, name)

    def max_sentence_length(self) -> int:
        return max((max(len(s), len(t)) for split in SPLITS for s, t in self.split(split)), default=0)


@dataclass
class Batch:
    """Padded id arrays; masks are True on real tokens"""

    src_ids: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return int(self.src_ids.shape[0])

    @property
    def num_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def _token_width(vocab_size: int) -> int:
    return len(str(vocab_size - 1))


def _generate_task(
    kind: str,
    vocab_size: int,
    len_range: Tuple[int, int],
    n_pairs: int,
    seed: int,
    max_len: Optional[int],
) -> ParallelCorpus:
    lo, hi = len_range
    if vocab_size < 8:
        raise UsageError(f"vocab_size must be at least 8, got {vocab_size}")
    if not 1 <= lo <= hi:
        raise UsageError(f"invalid length range {len_range}")
    if max_len is not None and hi + 1 > max_len:
        raise UsageError(f"length range {len_range} does not fit max_len {max_len} (bos/eos included)")
    n_held = n_pairs // 20
    if n_held < 1:
        raise UsageError(f"n_pairs={n_pairs} is too small for a 90/5/5 split (need at least 20)")

    rng = RngStreams(seed).corpus()
    n_content = vocab_size - len(RESERVED_TOKENS)
    width = _token_width(vocab_size)
    src_tokens = [f"s{i + len(RESERVED_TOKENS):0{width}d}" for i in range(n_content)]
    tgt_tokens = [f"t{i + len(RESERVED_TOKENS):0{width}d}" for i in range(n_content)]
    bijection = rng.permutation(n_content) if kind == "reversal" else np.arange(n_content)

    capacity = sum(n_content ** length for length in range(lo, hi + 1))
    if capacity < n_pairs:
        raise UsageError(f"only {capacity} distinct sources exist for these settings, need {n_pairs}")

    seen = set()
    sources: List[Tuple[int, ...]] = []
    while len(sources) < n_pairs:
        length = int(rng.integers(lo, hi + 1))
        seq = tuple(int(v) for v in rng.integers(0, n_content, size=length))
        if seq not in seen:
            seen.add(seq)
            sources.append(seq)

    src_vocab = Vocab(src_tokens)
    tgt_vocab = Vocab(tgt_tokens)
    pairs: List[Pair] = []
    for seq in sources:
        mapped = [int(bijection[v]) for v in seq]
        if kind == "reversal":
            mapped = mapped[::-1]
        pairs.append((src_vocab.encode([src_tokens[v] for v in seq]),
                      tgt_vocab.encode([tgt_tokens[v] for v in mapped])))

    n_train = n_pairs - 2 * n_held
    corpus = ParallelCorpus(
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        train=pairs[:n_train],
        dev=pairs[n_train:n_train + n_held],
        test=pairs[n_train + n_held:],
        name=f"{kind}-v{vocab_size}-s{seed}",
    )
    logger.info(f"✅ Generated {kind} corpus: {n_train}/{n_held}/{n_held} pairs, vocab {vocab_size}")
    return corpus


def gen_reversal_task(
    vocab_size: int = 64,
    len_range: Tuple[int, int] = (5, 12),
    n_pairs: int = 20000,
    seed: int = 0,
    max_len: Optional[int] = None,
) -> ParallelCorpus:
    """
    Build a reversal-with-bijection corpus

    The target is the source reversed and mapped through a seeded
    permutation of the content vocabulary. Sources are unique, so the
    90/5/5 train/dev/test split is disjoint by sequence.

    Args:
        vocab_size: Vocabulary size including the four reserved ids
        len_range: Inclusive (min, max) sentence length
        n_pairs: Total number of pairs
        seed: Corpus seed
        max_len: Model max_len the lengths must fit (with bos/eos)

    Returns:
        ParallelCorpus
    """
    return _generate_task("reversal", vocab_size, len_range, n_pairs, seed, max_len)


def gen_copy_task(
    vocab_size: int = 64,
    len_range: Tuple[int, int] = (5, 12),
    n_pairs: int = 20000,
    seed: int = 0,
    max_len: Optional[int] = None,
) -> ParallelCorpus:
    """Identity-mapped copy corpus (the easier secondary task)"""
    return _generate_task("copy", vocab_size, len_range, n_pairs, seed, max_len)


def _read_tsv(path: Path) -> List[Tuple[List[str], List[str]]]:
    rows = []
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"corpus file not found: {path}") from e
    except UnicodeDecodeError as e:
        raise ParseError(f"{path} is not UTF-8: {e}") from e
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError(f"{path.name}: expected 'source<TAB>target'", line_number=number)
        src, tgt = (side.split() for side in line.split("\t", 1))
        if not src or not tgt:
            empty = "source" if not src else "target"
            raise ParseError(f"{path.name}: empty {empty} sentence", line_number=number)
        rows.append((src, tgt))
    return rows


def _read_vocab(path: Path) -> Vocab:
    tokens = path.read_text(encoding="utf-8").split()
    if not tokens:
        raise ParseError(f"{path.name}: vocabulary file is empty")
    return Vocab(tokens)


def load_tsv_corpus(path: Union[str, Path]) -> ParallelCorpus:
    """
    Load a whitespace-tokenised TSV corpus

    ``path`` is either a directory holding train.tsv/dev.tsv/test.tsv or a
    single file whose pairs all become the train split. A directory written
    by ``write_tsv_corpus`` carries src.vocab/tgt.vocab, which fix the ids;
    otherwise vocabularies are built from train and unseen dev/test tokens
    map to unk.
    """
    path = Path(path)
    vocab_files = None
    if path.is_dir():
        raw = {split: _read_tsv(path / f"{split}.tsv") if (path / f"{split}.tsv").exists() else []
               for split in SPLITS}
        if not (path / "train.tsv").exists():
            raise DataError(f"{path} has no train.tsv")
        if (path / SRC_VOCAB_NAME).exists() and (path / TGT_VOCAB_NAME).exists():
            vocab_files = (path / SRC_VOCAB_NAME, path / TGT_VOCAB_NAME)
    else:
        raw = {"train": _read_tsv(path), "dev": [], "test": []}

    if not raw["train"]:
        raise UsageError(f"{path} contains no sentence pairs")

    if vocab_files is not None:
        src_vocab, tgt_vocab = (_read_vocab(f) for f in vocab_files)
    else:
        src_vocab = Vocab(tok for src, _ in raw["train"] for tok in src)
        tgt_vocab = Vocab(tok for _, tgt in raw["train"] for tok in tgt)
    splits = {name: [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in rows]
              for name, rows in raw.items()}
    logger.info(f"📊 Loaded {path}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return ParallelCorpus(src_vocab, tgt_vocab, splits["train"], splits["dev"], splits["test"],
                          name=path.stem)


def write_tsv_corpus(corpus: ParallelCorpus, directory: Union[str, Path]) -> List[Path]:
    """Write train.tsv, dev.tsv, test.tsv and the two vocabularies under ``directory``"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for split in SPLITS:
        target = directory / f"{split}.tsv"
        lines = [" ".join(corpus.src_vocab.decode(s)) + "\t" + " ".join(corpus.tgt_vocab.decode(t))
                 for s, t in corpus.split(split)]
        target.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        written.append(target)
    for name, vocab in ((SRC_VOCAB_NAME, corpus.src_vocab), (TGT_VOCAB_NAME, corpus.tgt_vocab)):
        target = directory / name
        target.write_text("".join(tok + "\n" for tok in vocab.id_to_token[len(RESERVED_TOKENS):]),
                          encoding="utf-8")
        written.append(target)
    return written


def collate(pairs: Sequence[Pair]) -> Batch:
    """Pad a list of pairs to the per-batch maximum lengths"""
    size = len(pairs)
    src_len = max(len(s) for s, _ in pairs)
    tgt_len = max(len(t) for _, t in pairs) + 1
    src_ids = np.full((size, src_len), PAD_ID, dtype=np.int64)
    tgt_in = np.full((size, tgt_len), PAD_ID, dtype=np.int64)
    tgt_out = np.full((size, tgt_len), PAD_ID, dtype=np.int64)
    for row, (src, tgt) in enumerate(pairs):
        src_ids[row, :len(src)] = src
        tgt_in[row, :len(tgt) + 1] = (BOS_ID,) + tuple(tgt)
        tgt_out[row, :len(tgt) + 1] = tuple(tgt) + (EOS_ID,)
    return Batch(src_ids, tgt_in, tgt_out, src_ids != PAD_ID, tgt_out != PAD_ID)


def make_batches(
    pairs: Sequence[Pair],
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epochs: Optional[int] = 1,
) -> Iterator[Batch]:
    """
    Yield padded batches, re-shuffling at every epoch boundary

    Args:
        pairs: Sentence pairs of one split
        batch_size: Pairs per batch (the last batch of an epoch may be smaller)
        seed: Seed of the data stream that drives shuffling
        shuffle: Keep corpus order when False
        epochs: Number of passes; None iterates forever

    Yields:
        Batch
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if not pairs:
        return
    streams = RngStreams(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = streams.shuffle(epoch).permutation(len(pairs)) if shuffle else np.arange(len(pairs))
        for start in range(0, len(pairs), batch_size):
            yield collate([pairs[i] for i in order[start:start + batch_size]])
        epoch += 1
