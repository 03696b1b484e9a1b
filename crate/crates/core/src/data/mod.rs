//! Corpus manifests, replayable mixture synthesis and the synthetic toy corpus.

mod manifest;
mod mixture;
mod toy;

pub use manifest::{read_jsonl, write_jsonl, Manifest, Source, SourceBank, UtteranceRecord};
pub use mixture::{
    derive_seed, materialize_test_set, render_mixture, sample_mixture_spec, Component, CueAbsence, MixtureSpec,
    RenderedMixture, SamplingMode, SpeakerCount, CUE_ABSENCE_PROB, MAX_SPEAKERS, MIN_SPEAKERS, SPEAKER_COUNT_PROBS,
};
pub use toy::{generate_toy_corpus, speaker_f0, synthesize_utterance, ToyCorpusConfig};

pub fn read_specs(path: impl AsRef<std::path::Path>) -> crate::Result<Vec<MixtureSpec>> {
    let specs: Vec<MixtureSpec> = read_jsonl(path)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn write_specs(path: impl AsRef<std::path::Path>, specs: &[MixtureSpec]) -> crate::Result<()> {
    write_jsonl(path, specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn corpus(dir: &std::path::Path, speakers: usize) -> Manifest {
        let cfg = ToyCorpusConfig { speakers, utterances_per_speaker: 2, utterance_seconds: 0.6, ..Default::default() };
        generate_toy_corpus(dir, &cfg).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_speaker_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 6);
        for seed in 0..200 {
            let a = sample_mixture_spec(&m, seed, &SamplingMode::protocol()).unwrap();
            assert_eq!(a, sample_mixture_spec(&m, seed, &SamplingMode::protocol()).unwrap());
            assert!((2..=5).contains(&a.n_speakers));
            assert!(a.guided() >= 1);
            let speakers: std::collections::HashSet<_> =
                a.components.iter().map(|c| &c.utterance_id[..5]).collect();
            assert_eq!(speakers.len(), a.n_speakers);
        }
    }

    #[test]
    fn too_few_speakers_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 3);
        assert!(matches!(sample_mixture_spec(&m, 0, &SamplingMode::protocol()), Err(crate::Error::Data(_))));
        assert!(matches!(sample_mixture_spec(&m, 0, &SamplingMode::fixed(4, 4, 0.0)), Err(crate::Error::Data(_))));
    }

    #[test]
    fn rendering_sums_exactly_and_orders_guided_first() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 5);
        let bank = SourceBank::load(&m, 16000).unwrap();
        let mut spec = materialize_test_set(&m, 1, 3, 2, 0.4, 7).unwrap().remove(0);
        spec.visual_present = vec![true, false, true];
        let r = render_mixture(&spec, &bank, 8000, 25.0).unwrap();
        assert_eq!(r.visuals.speakers(), 2);
        assert_eq!(r.visuals.frames(), 13);
        assert_eq!(r.source_order, vec![0, 2, 1]);
        // the same summation order reproduces the mixture bit for bit
        let mut sum = vec![0.0; 8000];
        for &row in &[0usize, 2, 1] {
            for (s, v) in sum.iter_mut().zip(r.refs.index_axis(Axis(0), row)) {
                *s += v;
            }
        }
        assert_eq!(sum, r.mix.samples());
        let masked = r.visuals.data().index_axis(Axis(0), 0).outer_iter().filter(|f| f.iter().all(|&v| v == 0.0)).count();
        assert!(masked >= 5);
        let again = render_mixture(&spec, &bank, 8000, 25.0).unwrap();
        assert_eq!(again.mix, r.mix);
        assert_eq!(again.visuals, r.visuals);
    }

    #[test]
    fn opposite_sources_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 2);
        let mut bank = SourceBank::load(&m, 16000).unwrap();
        let a = bank.sources["spk00_utt000"].audio.clone();
        bank.sources.get_mut("spk01_utt000").unwrap().audio = a.scaled(-1.0);
        let spec = MixtureSpec {
            sample_id: "x".into(),
            components: vec![
                Component { utterance_id: "spk00_utt000".into(), gain_db: "0".into() },
                Component { utterance_id: "spk01_utt000".into(), gain_db: "0.0".into() },
            ],
            n_speakers: 2,
            visual_present: vec![true, true],
            frame_mask_rate: 0.0,
            seed: 3,
        };
        let r = render_mixture(&spec, &bank, 9600, 25.0).unwrap();
        assert!(r.mix.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_sets_carry_their_condition() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 5);
        let full = materialize_test_set(&m, 50, 5, 5, 0.0, 1).unwrap();
        assert_eq!(full.len(), 50);
        assert!(full.iter().all(|s| s.visual_present.iter().all(|&b| b)));
        let one_missing = materialize_test_set(&m, 20, 5, 4, 0.4, 1).unwrap();
        assert!(one_missing.iter().all(|s| s.guided() == 4 && s.frame_mask_rate == 0.4));
        let p = dir.path().join("specs.jsonl");
        write_specs(&p, &one_missing).unwrap();
        assert_eq!(read_specs(&p).unwrap(), one_missing);
    }
}
