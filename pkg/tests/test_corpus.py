import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import active_power
from softvad import corpus
from softvad.corpus import (CorpusConfig, SplitConfig, Waveform, insert_silence,
                            label_from_clean, make_trials, mix_at_snr, synth_corpus)

SR = 16000


# ---------------------------------------------------------------- silence

def test_insert_silence_duration_arithmetic():
    w = Waveform(np.random.default_rng(0).standard_normal(10 * SR))
    out = insert_silence(w, 2.0, 2.0)
    assert out.duration == 14.0


def test_insert_silence_zero_is_identity():
    w = Waveform(np.random.default_rng(1).standard_normal(1234))
    np.testing.assert_array_equal(insert_silence(w, 0, 0).samples, w.samples)


def test_insert_silence_pads_exact_zeros():
    out = insert_silence(Waveform(np.ones(SR)), 0.5, 0.5)
    assert len(out) == 2 * SR
    assert np.all(out.samples[:8000] == 0) and np.all(out.samples[-8000:] == 0)
    assert np.all(out.samples[8000:-8000] == 1)


def test_insert_silence_on_empty_input():
    out = insert_silence(Waveform(np.zeros(0)), 0.25, 0.25)
    assert len(out) == 8000 and not out.samples.any()


def test_insert_silence_rejects_negative():
    with pytest.raises(ValueError):
        insert_silence(Waveform(np.ones(10)), -1, 0)


def test_waveform_rejects_stereo_and_nan():
    with pytest.raises(ValueError):
        Waveform(np.zeros((10, 2)))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


# ---------------------------------------------------------------- mixing

def test_mix_zero_db_means_equal_power():
    rng = np.random.default_rng(2)
    speech = Waveform(rng.standard_normal(SR))
    noise = Waveform(rng.standard_normal(SR) * 3.0)
    out = mix_at_snr(speech, noise, 0.0, np.random.default_rng(0))
    scaled = out.samples - speech.samples
    assert np.mean(scaled ** 2) / active_power(speech.samples) == pytest.approx(1.0, rel=1e-9)


def test_mix_high_snr_barely_changes_speech():
    rng = np.random.default_rng(3)
    speech = Waveform(0.5 * np.sin(2 * np.pi * 440 * np.arange(SR) / SR))
    noise = Waveform(rng.standard_normal(2 * SR))
    out = mix_at_snr(speech, noise, 60.0, rng)
    rel = np.sqrt(np.mean((out.samples - speech.samples) ** 2) / np.mean(speech.samples ** 2))
    assert rel <= 1e-3 * (1 + 1e-9)  # exactly 1e-3 up to rounding


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), snr=st.floats(-10, 30))
def test_mix_round_trip_snr_within_tenth_db(seed, snr):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(800, 8000))
    speech = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 2))
    noise = Waveform(rng.standard_normal(int(rng.integers(100, 10000))) * rng.uniform(0.01, 2))
    out = mix_at_snr(speech, noise, snr, rng)
    residual = out.samples - speech.samples
    measured = 10 * np.log10(active_power(speech.samples) / np.mean(residual ** 2))
    assert abs(measured - snr) < 0.1


def test_mix_reference_ignores_inserted_silence():
    rng = np.random.default_rng(4)
    speech = Waveform(rng.standard_normal(SR))
    padded = insert_silence(speech, 2.0, 2.0)
    noise = Waveform(rng.standard_normal(5 * SR))
    out = mix_at_snr(padded, noise, 5.0, rng)
    residual = out.samples - padded.samples
    measured = 10 * np.log10(active_power(speech.samples) / np.mean(residual ** 2))
    assert abs(measured - 5.0) < 0.1


def test_mix_errors():
    speech = Waveform(np.ones(1000))
    with pytest.raises(ValueError, match="degenerate noise"):
        mix_at_snr(speech, Waveform(np.zeros(500)), 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="sample-rate"):
        mix_at_snr(speech, Waveform(np.ones(500), 8000), 0.0, np.random.default_rng(0))


# ---------------------------------------------------------------- labels

def test_labels_of_silence_are_nonspeech():
    assert not label_from_clean(Waveform(np.zeros(SR))).any()


def test_labels_of_full_sine_are_speech():
    t = np.arange(SR) / SR
    assert label_from_clean(Waveform(np.sin(2 * np.pi * 1000 * t))).all()


def test_label_count_matches_frame_count():
    assert len(label_from_clean(Waveform(np.ones(SR)))) == 98


def test_hangover_extends_exactly_past_tone():
    t = np.arange(SR) / SR
    x = np.concatenate([np.sin(2 * np.pi * 1000 * t), np.zeros(SR)])
    labels = label_from_clean(Waveform(x), hangover_frames=8)
    # brute force: frame energies, threshold, last frame at/above it
    energies = [float(np.sum(x[i * 160:i * 160 + 400] ** 2)) for i in range((len(x) - 400) // 160 + 1)]
    peak = max(energies)
    active_log = [np.log10(e) for e in energies if e > 1e-4 * peak]
    thr = np.percentile(active_log, 30)
    raw = [e > 1e-4 * peak and np.log10(e) >= thr - 1e-9 for e in energies]
    last = max(i for i, r in enumerate(raw) if r)
    assert labels[:last + 1].all()
    assert labels[last + 1:last + 9].all()
    assert not labels[last + 9:].any()


def test_labels_after_lead_silence():
    rng = np.random.default_rng(5)
    clean = insert_silence(Waveform(rng.standard_normal(SR)), 2.0, 2.0)
    labels = label_from_clean(clean, hangover_frames=8)
    assert not labels[:int(np.ceil(2.0 / 0.01)) - 8].any()


def test_labels_too_short():
    with pytest.raises(ValueError):
        label_from_clean(Waveform(np.ones(399)))


def test_label_file_round_trip(tmp_path):
    labels = np.array([0, 1, 1, 0, 1], dtype=np.uint8)
    corpus.write_labels(tmp_path / "l.txt", labels)
    assert (tmp_path / "l.txt").read_text() == "01101\n"
    np.testing.assert_array_equal(corpus.read_labels(tmp_path / "l.txt"), labels)


def test_wav_round_trip_is_16bit_mono(tmp_path):
    w = Waveform(0.5 * np.sin(np.arange(1600) / 5))
    corpus.write_wav(tmp_path / "a.wav", w)
    back = corpus.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    np.testing.assert_allclose(back.samples, w.samples, atol=1 / 32767)


# ---------------------------------------------------------------- synthesis

def _test_only(n_spk, n_utt):
    return CorpusConfig(splits=[SplitConfig(name="test", n_speakers=n_spk, utts_per_speaker=n_utt,
                                            noises=["white", "pink", "am_tone"], snr_range=None,
                                            snr_set=[0.0, 5.0, 10.0], silence_s=2.0,
                                            speaker_prefix="te")])


def test_full_sized_test_split():
    m = synth_corpus(_test_only(105, 24), seed=0)
    assert len(m.select("test")) == 105 * 24
    assert {u.snr_db for u in m} == {0.0, 5.0, 10.0}
    assert {u.noise_type for u in m} == {"white", "pink", "am_tone"}


def test_train_split_snr_range():
    cfg = CorpusConfig(splits=[SplitConfig(n_speakers=3, utts_per_speaker=50)])
    snrs = [u.snr_db for u in synth_corpus(cfg, seed=1)]
    assert min(snrs) >= 0 and max(snrs) <= 10 and len(set(snrs)) > 10


def test_manifest_is_deterministic(tmp_path):
    cfg = _test_only(3, 4)
    synth_corpus(cfg, 7).to_jsonl(tmp_path / "a.jsonl")
    synth_corpus(cfg, 7).to_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_two_speakers_one_utterance():
    m = synth_corpus(_test_only(2, 1), seed=0)
    assert len(m) == 2 and len({u.speaker_id for u in m}) == 2


def test_empty_noise_inventory():
    cfg = CorpusConfig(splits=[SplitConfig(noises=[])])
    with pytest.raises(ValueError, match="noise"):
        synth_corpus(cfg, 0)


def test_rendered_corpus_is_consistent(tmp_path):
    cfg = CorpusConfig(duration_range=[0.5, 0.8], splits=[
        SplitConfig(name="test", n_speakers=2, utts_per_speaker=2, noises=["white"],
                    snr_range=None, snr_set=[5.0], silence_s=0.3, speaker_prefix="te")])
    m = synth_corpus(cfg, 3, tmp_path)
    m.to_jsonl(tmp_path / "manifest.jsonl")
    back = corpus.CorpusManifest.from_jsonl(tmp_path / "manifest.jsonl")
    for u in back:
        noisy = corpus.read_wav(back.resolve(u.audio_path))
        clean = corpus.read_wav(back.resolve(u.clean_path))
        labels = corpus.read_labels(back.resolve(u.label_path))
        assert len(noisy) == len(clean)
        assert len(labels) == (len(noisy) - 400) // 160 + 1
        # lead silence is labeled non-speech
        assert not labels[:20].any()


def test_rendering_is_order_independent():
    cfg = _test_only(2, 2)
    cfg.duration_range = [0.5, 0.6]
    recs, sil = corpus._plan(cfg, 11)
    a = corpus.render_utterance(recs[3], sil[3], cfg, 11)
    corpus.render_utterance(recs[0], sil[0], cfg, 11)
    b = corpus.render_utterance(recs[3], sil[3], cfg, 11)
    np.testing.assert_array_equal(a[1].samples, b[1].samples)


def test_manifest_rejects_duplicates_and_missing_clean():
    rec = corpus.UtteranceRecord("u1", "s1", "test", "a.wav", "c.wav", "white", 0.0, "l.txt")
    with pytest.raises(ValueError, match="duplicate"):
        corpus.CorpusManifest([rec, rec])
    bad = corpus.UtteranceRecord("u2", "s1", "enroll", "a.wav", None, "white", 0.0, None)
    with pytest.raises(ValueError, match="clean_path"):
        corpus.CorpusManifest([bad])


# ---------------------------------------------------------------- trials

def test_full_sized_trial_count():
    m = synth_corpus(_test_only(105, 24), seed=0)
    tl = make_trials(m, seed=0)
    assert len(tl) == 105 * 24
    assert sum(t.is_target for t in tl.trials) == 105 * 12


def test_enrollment_never_on_test_side():
    m = synth_corpus(_test_only(5, 8), seed=1)
    tl = make_trials(m, n_enroll=3, n_target=3, n_impostor=4, seed=2)
    enrolled = {u for utts in tl.enrollment.values() for u in utts}
    assert not enrolled & {t.test_utterance_id for t in tl.trials}
    spk_of = {u.utterance_id: u.speaker_id for u in m}
    for t in tl.trials:
        assert (spk_of[t.test_utterance_id] == t.enroll_speaker_id) == t.is_target


def test_two_speaker_impostor_is_other_speaker():
    m = synth_corpus(_test_only(2, 3), seed=0)
    tl = make_trials(m, n_enroll=1, n_target=1, n_impostor=1, seed=0)
    spk_of = {u.utterance_id: u.speaker_id for u in m}
    imp = [t for t in tl.trials if not t.is_target]
    assert len(imp) == 2
    assert all(spk_of[t.test_utterance_id] != t.enroll_speaker_id for t in imp)


def test_empty_trial_list():
    m = synth_corpus(_test_only(2, 3), seed=0)
    with pytest.raises(ValueError, match="empty trial list"):
        make_trials(m, n_enroll=1, n_target=0, n_impostor=0)


def test_insufficient_utterances_names_speaker():
    m = synth_corpus(_test_only(2, 3), seed=0)
    with pytest.raises(ValueError, match="spk-te0000"):
        make_trials(m, n_enroll=2, n_target=2, n_impostor=1)


def test_trial_files_round_trip(tmp_path):
    m = synth_corpus(_test_only(3, 4), seed=0)
    tl = make_trials(m, n_enroll=2, n_target=2, n_impostor=2, seed=0)
    tl.write(tmp_path / "trials.txt", tmp_path / "enroll.txt")
    first = (tmp_path / "trials.txt").read_text().splitlines()[0].split()
    assert len(first) == 3 and first[2] in ("target", "nontarget")
    back = corpus.TrialList.read(tmp_path / "trials.txt", tmp_path / "enroll.txt")
    assert back.trials == tl.trials and back.enrollment == tl.enrollment
    marked = corpus.mark_enrollment(m, tl)
    assert len(marked.select("enroll")) == 6
