"""
Tests for corpus generation, TSV loading and batching
"""

from collections import Counter

import numpy as np
import pytest

from service.batch_queue import BatchPrefetcher, PrefetchStatus, prefetch
from service.errors import DataError, ParseError, UsageError
from service.tasks import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SRC_VOCAB_NAME,
    gen_copy_task,
    gen_reversal_task,
    load_tsv_corpus,
    make_batches,
    write_tsv_corpus,
)


def _all_pairs(corpus):
    return corpus.train + corpus.dev + corpus.test


def test_reversal_targets_are_mapped_reversed_sources(tiny_corpus):
    """One consistent bijection maps reversed source tokens to target tokens"""
    mapping = {}
    for src, tgt in _all_pairs(tiny_corpus):
        assert len(src) == len(tgt)
        for s, t in zip(reversed(src), tgt):
            assert mapping.setdefault(s, t) == t
    assert len(set(mapping.values())) == len(mapping)


def test_copy_task_keeps_token_order():
    corpus = gen_copy_task(vocab_size=12, len_range=(2, 4), n_pairs=100, seed=0)
    for src, tgt in _all_pairs(corpus):
        src_tokens = [tok[1:] for tok in corpus.src_vocab.decode(src)]
        tgt_tokens = [tok[1:] for tok in corpus.tgt_vocab.decode(tgt)]
        assert src_tokens == tgt_tokens


def test_generation_is_deterministic_per_seed():
    a = gen_reversal_task(vocab_size=12, len_range=(2, 4), n_pairs=100, seed=5)
    b = gen_reversal_task(vocab_size=12, len_range=(2, 4), n_pairs=100, seed=5)
    c = gen_reversal_task(vocab_size=12, len_range=(2, 4), n_pairs=100, seed=6)
    assert _all_pairs(a) == _all_pairs(b)
    assert _all_pairs(a) != _all_pairs(c)


def test_splits_are_disjoint_and_sized(tiny_corpus):
    train = {src for src, _ in tiny_corpus.train}
    dev = {src for src, _ in tiny_corpus.dev}
    test = {src for src, _ in tiny_corpus.test}
    assert (len(tiny_corpus.train), len(tiny_corpus.dev), len(tiny_corpus.test)) == (180, 10, 10)
    assert not (train & dev) and not (train & test) and not (dev & test)


def test_lengths_stay_in_range(tiny_corpus):
    assert all(2 <= len(src) <= 4 for src, _ in _all_pairs(tiny_corpus))


@pytest.mark.parametrize("kwargs", [
    {"vocab_size": 7},
    {"n_pairs": 10},
    {"len_range": (3, 2)},
    {"len_range": (2, 20), "max_len": 16},
])
def test_generator_rejects_bad_arguments(kwargs):
    args = {"vocab_size": 12, "len_range": (2, 4), "n_pairs": 100, "seed": 0}
    args.update(kwargs)
    with pytest.raises(UsageError):
        gen_reversal_task(**args)


# TSV


def test_single_tsv_file_becomes_train_split(tmp_path):
    path = tmp_path / "pairs.tsv"
    path.write_text("a b\tc d\n", encoding="utf-8")
    corpus = load_tsv_corpus(path)
    assert len(corpus.train) == 1 and corpus.dev == [] and corpus.test == []
    src, tgt = corpus.train[0]
    assert corpus.src_vocab.decode(src) == ["a", "b"]
    assert corpus.tgt_vocab.decode(tgt) == ["c", "d"]


def test_empty_tsv_is_a_usage_error(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(UsageError):
        load_tsv_corpus(path)


def test_malformed_line_reports_its_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\nno tab here\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_tsv_corpus(path)
    assert info.value.line_number == 2


@pytest.mark.parametrize("line", ["\tc d\n", "a b\t \n"])
def test_empty_side_reports_its_number(tmp_path, line):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\n" + line, encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_tsv_corpus(path)
    assert info.value.line_number == 2


def test_missing_corpus_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        load_tsv_corpus(tmp_path / "nope.tsv")


def test_written_corpus_reloads_with_the_same_ids(tmp_path, tiny_corpus):
    write_tsv_corpus(tiny_corpus, tmp_path)
    loaded = load_tsv_corpus(tmp_path)
    assert loaded.src_vocab == tiny_corpus.src_vocab and loaded.tgt_vocab == tiny_corpus.tgt_vocab
    for split in ("train", "dev", "test"):
        assert loaded.split(split) == tiny_corpus.split(split)


def test_reload_keeps_ids_of_tokens_missing_from_train(tmp_path):
    corpus = gen_reversal_task(vocab_size=64, len_range=(1, 1), n_pairs=40, seed=0)
    write_tsv_corpus(corpus, tmp_path)
    loaded = load_tsv_corpus(tmp_path)
    assert len(loaded.src_vocab) == 64
    assert _all_pairs(loaded) == _all_pairs(corpus)


def test_directory_without_vocabularies_builds_them_from_train(tmp_path, tiny_corpus):
    write_tsv_corpus(tiny_corpus, tmp_path)
    (tmp_path / SRC_VOCAB_NAME).unlink()
    loaded = load_tsv_corpus(tmp_path)
    train_tokens = {tok for src, _ in tiny_corpus.train for tok in tiny_corpus.src_vocab.decode(src)}
    assert len(loaded.src_vocab) == 4 + len(train_tokens)


# Batching


def test_batch_size_one_has_no_padding(tiny_corpus):
    for batch in make_batches(tiny_corpus.dev, batch_size=1, shuffle=False):
        assert batch.src_mask.all() and batch.tgt_mask.all()


def test_unshuffled_batches_keep_corpus_order(tiny_corpus):
    batches = list(make_batches(tiny_corpus.dev, batch_size=3, shuffle=False))
    firsts = [tuple(int(i) for i in b.src_ids[0] if i != PAD_ID) for b in batches]
    assert firsts == [tiny_corpus.dev[i][0] for i in range(0, len(tiny_corpus.dev), 3)]


def test_each_epoch_is_a_permutation_of_the_split(tiny_corpus):
    pairs = tiny_corpus.train
    seen = Counter()
    for batch in make_batches(pairs, batch_size=32, seed=4, epochs=2):
        for row in batch.src_ids:
            seen[tuple(int(i) for i in row if i != PAD_ID)] += 1
    assert seen == Counter({src: 2 for src, _ in pairs})


def test_decoder_input_is_target_shifted_right(tiny_corpus):
    batch = next(make_batches(tiny_corpus.train, batch_size=8, shuffle=False))
    for row, (_, tgt) in enumerate(tiny_corpus.train[:8]):
        n = len(tgt)
        assert batch.tgt_in[row, 0] == BOS_ID
        assert batch.tgt_out[row, n] == EOS_ID
        np.testing.assert_array_equal(batch.tgt_in[row, 1:n + 1], batch.tgt_out[row, :n])
        assert batch.tgt_mask[row].sum() == n + 1


def test_batch_size_must_be_positive(tiny_corpus):
    with pytest.raises(UsageError):
        list(make_batches(tiny_corpus.train, batch_size=0))


# Prefetching


def test_prefetcher_preserves_order(tiny_corpus):
    direct = list(make_batches(tiny_corpus.train, batch_size=16, seed=2))
    with BatchPrefetcher(make_batches(tiny_corpus.train, batch_size=16, seed=2), max_queue_size=2) as queued:
        fetched = list(queued)
        stats = queued.get_statistics()
    assert len(fetched) == len(direct)
    for a, b in zip(direct, fetched):
        np.testing.assert_array_equal(a.src_ids, b.src_ids)
    assert stats["produced_batches"] == len(direct)
    assert stats["status"] == PrefetchStatus.EXHAUSTED.value


def test_prefetcher_forwards_producer_errors():
    def broken():
        yield 1
        raise DataError("bad shard")

    with pytest.raises(DataError):
        list(prefetch(broken(), depth=2))


def test_prefetch_depth_zero_is_passthrough(tiny_corpus):
    source = make_batches(tiny_corpus.dev, batch_size=4)
    assert prefetch(source, depth=0) is source


def test_prefetcher_stops_cleanly():
    queued = BatchPrefetcher(iter(range(1000)), max_queue_size=1)
    queued.start()
    assert next(queued) == 0
    queued.stop()
    assert queued.get_statistics()["status"] == PrefetchStatus.STOPPED.value
