import numpy as np
import pytest

from codecvc.corpus import (CorpusConfig, gen_corpus, hesitation_run_lengths, oracle_at, oracle_st,
                            render_pseudo_waveform, speaker_free_codes, speaker_permutation)
from codecvc.vocab import (AcousticGrid, SemanticStream, TokenVocabulary, dedup_consecutive, format_record,
                           parse_record, validate_grid)

VOCAB = TokenVocabulary(500, 64, 4)


def test_same_seed_bit_identical():
    a, b = gen_corpus(32, 7, VOCAB), gen_corpus(32, 7, VOCAB)
    assert [format_record(u.to_record()) for u in a] == [format_record(u.to_record()) for u in b]
    c = gen_corpus(32, 8, VOCAB)
    assert [u.text for u in a] != [u.text for u in c]


def test_layout_and_invariants():
    corpus = gen_corpus(32, 0, VOCAB)
    assert len({u.text for u in corpus}) == 8
    for u, utt in enumerate(corpus):
        assert utt.id == f"utt{u:05d}"
        assert utt.speaker == u % 4 and utt.text == corpus[u - u % 4].text
        assert len(utt.text) <= 10
        assert set(utt.text) <= set("abdeiklmnorstu~ ")
        assert utt.at.T == len(utt.st_raw) and utt.at.K == 4
        assert validate_grid(utt.at, VOCAB).ok
        SemanticStream(dedup_consecutive(utt.st_raw, VOCAB).tokens)
        assert parse_record(format_record(utt.to_record())) == utt.to_record()


def test_size_one():
    (u,) = gen_corpus(1, 3, VOCAB)
    assert validate_grid(u.at, VOCAB).ok and len(u.st_raw) >= len(u.text)
    with pytest.raises(ValueError):
        gen_corpus(0, 3, VOCAB)
    with pytest.raises(ValueError):
        gen_corpus(4, 3, VOCAB, K=5)


def test_oracles_match_storage():
    corpus = gen_corpus(32, 5, VOCAB)
    for u in corpus:
        assert tuple(oracle_st(u.text, 5, u.speaker, VOCAB)) == u.st_raw
        assert oracle_at(u.st_raw, u.speaker, 5, VOCAB) == u.at
    assert oracle_st("", 5, 0, VOCAB) == []


def test_acoustic_rule_by_hand():
    # re-derive every cell from the two published tables with explicit loops
    corpus = gen_corpus(8, 2, VOCAB)
    for u in corpus:
        codes = speaker_free_codes(u.st_raw, 2, VOCAB)
        perm = speaker_permutation(2, u.speaker, VOCAB.at_size, VOCAB.K)
        for t in range(u.at.T):
            for k in range(VOCAB.K):
                assert u.at.tokens[t, k] == perm[k][codes[t, k]]
    for k in range(VOCAB.K):
        assert sorted(perm[k]) == list(range(VOCAB.at_size))


def test_characters_become_runs_of_one_to_four():
    for u in gen_corpus(16, 1, VOCAB):
        runs = []
        prev = None
        for s in u.st_raw:
            if s == prev:
                runs[-1] += 1
            else:
                runs.append(1)
            prev = s
        assert sum(runs) == len(u.st_raw)
        assert len(u.st_raw) <= 4 * len(u.text)
        assert len(u.st_raw) >= len(u.text)


def test_hesitation_runs_are_longer():
    config = CorpusConfig(seed=4, num_speakers=16)
    corpus = gen_corpus(2000, 4, VOCAB, config=config)
    hes, ordinary = hesitation_run_lengths(corpus, config, VOCAB)
    assert len(hes) >= 1000 and len(ordinary) >= 1000
    assert np.mean(hes) > np.mean(ordinary)
    assert min(hes + ordinary) >= 1 and max(hes + ordinary) <= 4


def test_pseudo_waveform():
    g = AcousticGrid(np.array([[1, 2, 3, 4]] * 5))
    wav = render_pseudo_waveform(g, 16000, 320)
    assert wav.shape == (1600,) and wav.dtype == np.float32
    blocks = wav.reshape(5, 320)
    assert all(np.array_equal(blocks[0], b) for b in blocks)
    assert np.abs(wav).max() <= 1.0
    assert render_pseudo_waveform(AcousticGrid.empty(4)).shape == (0,)
