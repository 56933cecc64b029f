"""
Tests for greedy decoding and teacher-forced token accuracy
"""

from service.model import MaskSet
from service.tasks import EOS_ID, PAD_ID
from service.translate import TranslationService, greedy_decode, token_accuracy, token_accuracy_counts


def test_greedy_decode_returns_one_hypothesis_per_source(tiny_model, tiny_corpus):
    sources = [src for src, _ in tiny_corpus.dev]
    hypotheses = greedy_decode(tiny_model, sources, batch_size=4)
    assert len(hypotheses) == len(sources)
    for hypothesis in hypotheses:
        assert len(hypothesis) <= tiny_model.config.max_len - 1
        assert EOS_ID not in hypothesis and PAD_ID not in hypothesis
        assert all(0 <= t < tiny_model.config.vocab_tgt for t in hypothesis)


def test_decode_length_cap(tiny_model, tiny_corpus):
    service = TranslationService(tiny_model, batch_size=8, max_decode_len=3)
    assert all(len(h) <= 3 for h in service.translate_ids([src for src, _ in tiny_corpus.dev]))


def test_decoding_is_deterministic(tiny_model, tiny_corpus):
    sources = [src for src, _ in tiny_corpus.dev[:5]]
    assert greedy_decode(tiny_model, sources) == greedy_decode(tiny_model, sources)


def test_decoding_with_every_head_closed(tiny_model, tiny_corpus):
    everything = MaskSet.from_heads(tiny_model.config.all_heads())
    hypotheses = greedy_decode(tiny_model, [src for src, _ in tiny_corpus.dev[:3]], everything)
    assert len(hypotheses) == 3


def test_translate_text_uses_corpus_vocabularies(tiny_model, tiny_corpus):
    service = TranslationService(tiny_model)
    text = " ".join(tiny_corpus.src_vocab.decode(tiny_corpus.dev[0][0]))
    output = service.translate_text(text, tiny_corpus)
    assert all(token in tiny_corpus.tgt_vocab.token_to_id for token in output.split())
    assert service.translate_text("", tiny_corpus) == ""


def test_statistics_track_and_reset(tiny_model, tiny_corpus):
    service = TranslationService(tiny_model)
    service.translate_ids([src for src, _ in tiny_corpus.dev[:4]])
    stats = service.get_statistics()
    assert stats["stats"]["total_translations"] == 4
    assert stats["settings"]["max_decode_len"] == tiny_model.config.max_len - 1
    service.reset_statistics()
    assert service.get_statistics()["stats"]["total_translations"] == 0


def test_token_accuracy_counts_every_target_token_plus_eos(tiny_model, tiny_corpus):
    correct, total = token_accuracy_counts(tiny_model, tiny_corpus.dev, batch_size=3)
    assert total == sum(len(tgt) + 1 for _, tgt in tiny_corpus.dev)
    assert 0 <= correct <= total


def test_open_mask_does_not_change_accuracy(tiny_model, tiny_corpus):
    plain = token_accuracy(tiny_model, tiny_corpus.dev)
    assert token_accuracy(tiny_model, tiny_corpus.dev, MaskSet()) == plain
    assert 0.0 <= plain <= 1.0


def test_empty_split_has_zero_accuracy(tiny_model):
    assert token_accuracy(tiny_model, []) == 0.0
