mod common;

use common::{small_data, small_model};
use proptest::prelude::*;
use steervec_core::data::{select_group, GroupedDataset};
use steervec_core::eval::{best_entry, group_accuracies, layer_profile, ProfileEntry};
use steervec_core::model::{forward, InterventionSpec};
use steervec_core::steering::{
    capture_dump, diff_in_means, extract_candidates, mean_activations, mean_field_from_dump,
    sweep_single_layer, CandidateVector, VectorContent, VectorFile,
};
use steervec_core::Error;

/// Straight double loop over examples, layers, positions and coordinates.
fn brute_force_means(params: &steervec_core::ModelParams<f32>, group: &GroupedDataset) -> Vec<f64> {
    let cfg = &params.config;
    let mut acc = vec![0.0f64; cfg.n_layers * cfg.seq_len * cfg.d_model];
    for ex in &group.examples {
        let (_, trace) = forward(params, &ex.tokens, &InterventionSpec::None, true).unwrap();
        let trace = trace.unwrap();
        let mut k = 0;
        for l in 1..=cfg.n_layers {
            for t in 0..cfg.seq_len {
                for &v in trace.at(steervec_core::HookPoint::ResidPre(l), t) {
                    acc[k] += v as f64;
                    k += 1;
                }
            }
        }
    }
    acc.iter().map(|s| s / group.len() as f64).collect()
}

fn take(ds: &GroupedDataset, n: usize) -> GroupedDataset {
    GroupedDataset::new(
        ds.examples[..n].to_vec(),
        ds.n_classes,
        ds.n_confounders,
        "subset",
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn means_match_brute_force(seed in 0u64..1000, n in 1usize..=20) {
        let params = small_model(seed);
        let group = take(&small_data(seed ^ 77, 24), n);
        let fast = mean_activations(&params, &group).unwrap();
        let slow = brute_force_means(&params, &group);
        prop_assert_eq!(fast.n_samples, n);
        for (a, b) in fast.means.iter().zip(&slow) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn dump_means_match_model_means(seed in 0u64..1000) {
        let params = small_model(seed);
        let ds = small_data(seed, 16);
        let dump = capture_dump(&params, &ds).unwrap();
        let from_dump = mean_field_from_dump(&dump, |y, a| y == 0 && a == 0, "g00").unwrap();
        let direct = mean_activations(&params, &select_group(&ds, 0, 0).unwrap()).unwrap();
        for (a, b) in from_dump.means.iter().zip(&direct.means) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn candidates_are_normalized_differences(seed in 0u64..1000, position in 0usize..8) {
        let params = small_model(seed);
        let ds = small_data(seed, 40);
        let over = select_group(&ds, 0, 0).unwrap();
        let under = select_group(&ds, 1, 1).unwrap();
        let cands = extract_candidates(&params, &over, &under, position).unwrap();
        prop_assert_eq!(cands.len(), params.config.n_layers);
        let mu = brute_force_means(&params, &over);
        let nu = brute_force_means(&params, &under);
        let d = params.config.d_model;
        for c in &cands {
            let o = ((c.layer - 1) * params.config.seq_len + position) * d;
            for i in 0..d {
                prop_assert!((c.raw[i] as f64 - (mu[o + i] - nu[o + i])).abs() <= 2e-5);
            }
            match &c.direction {
                Some(r) => {
                    let n: f64 = r.as_slice().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() <= 1e-5);
                }
                None => prop_assert!(c.norm <= 1e-8),
            }
        }
    }

    #[test]
    fn best_entry_is_the_lexicographic_maximum(
        raw in prop::collection::vec((0u8..5, 0u8..5), 1..8),
    ) {
        let entries: Vec<ProfileEntry> = raw.iter().enumerate()
            .map(|(i, &(w, a))| ProfileEntry { layer: i + 1, position: 0, wga: w as f64 / 4.0, aga: a as f64 / 4.0 })
            .collect();
        let got = best_entry(&entries).unwrap();
        let mut sorted: Vec<usize> = (0..entries.len()).collect();
        sorted.sort_by(|&i, &j| {
            entries[j].wga.total_cmp(&entries[i].wga)
                .then(entries[j].aga.total_cmp(&entries[i].aga))
                .then(entries[i].layer.cmp(&entries[j].layer))
        });
        prop_assert_eq!(got, sorted[0]);
    }
}

#[test]
fn cls_candidate_at_first_layer_is_degenerate() {
    // Every input has the same CLS embedding at layer 1, so the difference vanishes.
    let params = small_model(3);
    let ds = small_data(3, 60);
    let over = select_group(&ds, 0, 0).unwrap();
    let under = select_group(&ds, 1, 1).unwrap();
    let cands = extract_candidates(&params, &over, &under, 0).unwrap();
    assert!(cands[0].is_degenerate());
    assert!(cands[1..].iter().all(|c| !c.is_degenerate()));
}

#[test]
fn identical_groups_give_only_degenerate_candidates() {
    let params = small_model(3);
    let ds = small_data(3, 20);
    let mu = mean_activations(&params, &ds).unwrap();
    let all = diff_in_means(&mu, &mu).unwrap();
    assert!(all.iter().all(CandidateVector::is_degenerate));
    let cands: Vec<_> = all.into_iter().filter(|c| c.position == 1).collect();
    assert!(matches!(
        sweep_single_layer(&params, &cands, &ds),
        Err(Error::Steering(_))
    ));
}

#[test]
fn sweep_agrees_with_exhaustive_evaluation() {
    for seed in 0..4 {
        let params = small_model(seed);
        let ds = small_data(seed, 200);
        let over = select_group(&ds, 0, 0).unwrap();
        let under = select_group(&ds, 0, 1).unwrap();
        let cands = extract_candidates(&params, &over, &under, 1).unwrap();
        let sweep = sweep_single_layer(&params, &cands, &ds).unwrap();

        let mut best: Option<(f64, f64, usize)> = None;
        for c in cands.iter().filter(|c| !c.is_degenerate()) {
            let spec = InterventionSpec::SingleGlobal {
                direction: c.direction.clone().unwrap(),
            };
            let r = group_accuracies(&params, &ds, &spec).unwrap();
            let key = (r.wga, r.aga, c.layer);
            best = Some(match best {
                Some(b) if (b.0, b.1) >= (key.0, key.1) => b,
                _ => key,
            });
        }
        let best = best.unwrap();
        assert_eq!(sweep.chosen_layer, best.2, "seed {seed}");
        assert_eq!((sweep.chosen_wga, sweep.chosen_aga), (best.0, best.1));

        // sign flip leaves the choice unchanged
        let flipped: Vec<CandidateVector> = cands
            .iter()
            .map(|c| {
                CandidateVector::from_raw(c.layer, c.position, c.raw.iter().map(|v| -v).collect())
            })
            .collect();
        let again = sweep_single_layer(&params, &flipped, &ds).unwrap();
        assert_eq!(again.entries, sweep.entries);
        assert_eq!(again.chosen_layer, sweep.chosen_layer);

        let profile = layer_profile(&params, &cands, &ds).unwrap();
        assert_eq!(profile.entries, sweep.entries);
        assert!(profile.entries.windows(2).all(|w| w[0].layer < w[1].layer));
    }
}

#[test]
fn vector_files_round_trip_bitwise() {
    let params = small_model(4);
    let ds = small_data(4, 60);
    let over = select_group(&ds, 0, 0).unwrap();
    let under = select_group(&ds, 1, 1).unwrap();
    let cands = extract_candidates(&params, &over, &under, 0).unwrap();
    let file = VectorFile {
        config_digest: params.config.digest(),
        content: VectorContent::Candidates(cands.clone()),
    };
    let bytes = file.to_bytes();
    let back = VectorFile::from_bytes(&bytes).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_bytes(), bytes);
    back.verify(&params.config).unwrap();

    let other = small_model(5);
    assert!(matches!(
        back.verify(&other.config),
        Err(Error::Mismatch(_))
    ));

    let mut corrupt = bytes.clone();
    corrupt[1] = 0;
    assert!(matches!(
        VectorFile::from_bytes(&corrupt),
        Err(Error::Format { offset: 0, .. })
    ));
    assert!(matches!(
        VectorFile::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));

    let raw = vec![0.25f32; 2 * 8 * 8];
    let field = VectorFile {
        config_digest: params.config.digest(),
        content: VectorContent::Field {
            n_layers: 2,
            seq_len: 8,
            d_model: 8,
            raw,
        },
    };
    let back = VectorFile::from_bytes(&field.to_bytes()).unwrap();
    assert_eq!(back, field);
    assert_eq!(back.content.to_field().unwrap().masked_count(), 0);
    assert!(back.content.candidates().is_err());
}
