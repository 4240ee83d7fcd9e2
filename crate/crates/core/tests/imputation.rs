mod common;

use common::*;
use giim::case::ViewId;
use giim::imputation::{
    fit_covariance, impute_constant, impute_covariance, impute_learnable, impute_rag, CovarianceFit, DbEntry,
    FeatureDatabase, Imputer, ImputerKind,
};
use giim::model::Architecture;
use giim::tensor::Tensor;
use giim::train::{train_observed, TrainConfig};
use giim::{Error, Task};
use rand::Rng;

fn db_of(rows: Vec<Vec<Vec<f64>>>) -> FeatureDatabase {
    FeatureDatabase::new(
        rows.into_iter()
            .enumerate()
            .map(|(i, views)| DbEntry {
                id: format!("e{i}"),
                patient_id: format!("p{i}"),
                features: views.iter().map(|v| Tensor::row(v)).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn contains_verbatim(db: &FeatureDatabase, view: ViewId, t: &Tensor) -> bool {
    db.entries.iter().any(|e| &e.features[view.0] == t)
}

#[test]
fn retrieval_matches_brute_force_on_random_databases() {
    let mut r = rng(100);
    for _ in 0..100 {
        let n = r.random_range(2..=50);
        let views = r.random_range(2..=4);
        let width = r.random_range(1..=16);
        let db = random_db(&mut r, n, views, width);
        let missing = ViewId(r.random_range(0..views));
        let available: Vec<ViewId> = (0..views).map(ViewId).filter(|&v| v != missing).collect();
        let query: Vec<(ViewId, Tensor)> = available.iter().map(|&v| (v, random_row(&mut r, width))).collect();
        let qref: Vec<(ViewId, &Tensor)> = query.iter().map(|(v, t)| (*v, t)).collect();

        let rag = impute_rag(&qref, missing, &db, None).unwrap();
        assert_eq!(rag.index, brute_rag(&db, &query));
        assert_eq!(rag.feature, db.entries[rag.index].features[missing.0]);

        let fit = fit_covariance(&db, &available, missing).unwrap();
        let cov = impute_covariance(&qref, &fit, &db, None).unwrap();
        let q: Vec<Tensor> = query.iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(cov.index, brute_covariance(&db, &available, &q));
        assert_eq!(cov.feature, db.entries[cov.index].features[missing.0]);
    }
}

#[test]
fn ties_resolve_to_the_lowest_index() {
    // Entries 1 and 3 are identical and best; entry 0 is orthogonal.
    let db = db_of(vec![
        vec![vec![0.0, 1.0], vec![9.0, 9.0]],
        vec![vec![1.0, 0.0], vec![1.0, 1.0]],
        vec![vec![-1.0, 0.0], vec![2.0, 2.0]],
        vec![vec![1.0, 0.0], vec![3.0, 3.0]],
    ]);
    let q = Tensor::row(&[2.0, 0.0]);
    let got = impute_rag(&[(ViewId(0), &q)], ViewId(1), &db, None).unwrap();
    assert_eq!((got.index, got.score), (1, 1.0));
    assert_eq!(got.feature.data(), &[1.0, 1.0]);
}

#[test]
fn rag_examples() {
    let mut r = rng(1);
    let db = random_db(&mut r, 5, 3, 4);
    let e = &db.entries[2];
    let query = [(ViewId(0), &e.features[0]), (ViewId(2), &e.features[2])];
    let got = impute_rag(&query, ViewId(1), &db, None).unwrap();
    assert_eq!(got.index, 2);
    assert!((got.score - 1.0).abs() < 1e-12);
    assert_eq!(got.feature, e.features[1]);

    let db = db_of(vec![vec![vec![0.0, 1.0], vec![5.0, 5.0]], vec![vec![3.0, 0.0], vec![6.0, 6.0]]]);
    let q = Tensor::row(&[1.0, 0.0]);
    assert_eq!(impute_rag(&[(ViewId(0), &q)], ViewId(1), &db, None).unwrap().feature.data(), &[6.0, 6.0]);
}

#[test]
fn zero_norm_similarity_is_minus_one() {
    let db = db_of(vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![vec![-1.0, 0.0], vec![2.0, 2.0]]]);
    let q = Tensor::row(&[1.0, 0.0]);
    let got = impute_rag(&[(ViewId(0), &q)], ViewId(1), &db, None).unwrap();
    // Entry 0 scores −1 by convention, entry 1 scores −1 by cosine: tie → 0.
    assert_eq!(got.index, 0);
    let zero = Tensor::row(&[0.0, 0.0]);
    let got = impute_rag(&[(ViewId(0), &zero)], ViewId(1), &db, None).unwrap();
    assert_eq!((got.index, got.score), (0, -1.0));
}

#[test]
fn retrieval_skips_the_excluded_patient() {
    let db = db_of(vec![vec![vec![1.0, 0.0], vec![1.0, 1.0]], vec![vec![0.5, 0.5], vec![2.0, 2.0]]]);
    let q = Tensor::row(&[1.0, 0.0]);
    let got = impute_rag(&[(ViewId(0), &q)], ViewId(1), &db, Some("p0")).unwrap();
    assert_eq!(got.index, 1);
}

#[test]
fn covariance_examples() {
    // Single available view: Δ is that view. Δ₁=[1,0], Δ₂=[0,1].
    let db = db_of(vec![vec![vec![1.0, 0.0], vec![7.0, 7.0]], vec![vec![0.0, 1.0], vec![8.0, 8.0]]]);
    let fit = fit_covariance(&db, &[ViewId(0)], ViewId(1)).unwrap();
    assert_eq!(fit.mu.data(), &[0.5, 0.5]);
    assert_eq!(fit.sigma.data(), &[0.5, -0.5, -0.5, 0.5]);
    let q = Tensor::row(&[1.0, 0.0]);
    assert_eq!(fit.score(q.data(), 0), 0.5);
    assert_eq!(fit.score(q.data(), 1), -0.5);
    let got = impute_covariance(&[(ViewId(0), &q)], &fit, &db, None).unwrap();
    assert_eq!((got.index, got.feature.data()), (0, &[7.0, 7.0][..]));

    let same = db_of(vec![vec![vec![1.0, 2.0], vec![0.0, 0.0]]; 3]);
    let fit = fit_covariance(&same, &[ViewId(0)], ViewId(1)).unwrap();
    assert!(fit.sigma.data().iter().all(|&x| x == 0.0));

    assert!(matches!(
        fit_covariance(&db_of(vec![vec![vec![1.0], vec![1.0]]]), &[ViewId(0)], ViewId(1)),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn identity_covariance_is_dot_product_retrieval() {
    let mut r = rng(3);
    let db = random_db(&mut r, 20, 2, 4);
    let fit = fit_covariance(&db, &[ViewId(0)], ViewId(1)).unwrap();
    let deltas: Vec<Tensor> = db.entries.iter().map(|e| e.features[0].clone()).collect();
    let eye = CovarianceFit::from_parts(vec![ViewId(0)], ViewId(1), Tensor::identity(4), fit.mu.clone(), deltas, false);
    let q = random_row(&mut r, 4);
    let got = impute_covariance(&[(ViewId(0), &q)], &eye, &db, None).unwrap();
    let dots: Vec<f64> = db
        .entries
        .iter()
        .map(|e| e.features[0].data().iter().zip(q.data()).map(|(a, b)| a * b).sum())
        .collect();
    assert_eq!(got.index, first_argmax(&dots));
}

#[test]
fn covariance_matches_two_pass_computation_and_is_symmetric() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (n, width) = (r.random_range(2..30), r.random_range(1..8));
        let db = random_db(&mut r, n, 3, width);
        let avail = [ViewId(0), ViewId(2)];
        let fit = fit_covariance(&db, &avail, ViewId(1)).unwrap();
        let deltas: Vec<Vec<f64>> = db
            .entries
            .iter()
            .map(|e| plain_delta(&[e.features[0].data(), e.features[2].data()]))
            .collect();
        let (mu, sigma) = two_pass_covariance(&deltas);
        let c = mu.len();
        for a in 0..c {
            assert!((fit.mu.data()[a] - mu[a]).abs() < 1e-10);
            for b in 0..c {
                assert!((fit.sigma.data()[a * c + b] - sigma[a][b]).abs() < 1e-10);
                assert_eq!(fit.sigma.data()[a * c + b], fit.sigma.data()[b * c + a]);
            }
        }
    }
}

#[test]
fn covariance_rejects_a_different_view_set() {
    let mut r = rng(5);
    let db = random_db(&mut r, 5, 3, 2);
    let fit = fit_covariance(&db, &[ViewId(0), ViewId(1)], ViewId(2)).unwrap();
    let q = random_row(&mut r, 2);
    assert!(matches!(
        impute_covariance(&[(ViewId(0), &q)], &fit, &db, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn argmax_is_invariant_to_global_positive_scaling() {
    let mut r = rng(6);
    for _ in 0..30 {
        let db = random_db(&mut r, 15, 3, 5);
        let alpha = r.random_range(0.1..10.0);
        let scaled = FeatureDatabase::new(
            db.entries
                .iter()
                .map(|e| DbEntry {
                    features: e.features.iter().map(|f| f.scale(alpha)).collect(),
                    ..e.clone()
                })
                .collect(),
        )
        .unwrap();
        let q0 = random_row(&mut r, 5);
        let q2 = random_row(&mut r, 5);
        let (s0, s2) = (q0.scale(alpha), q2.scale(alpha));
        let a = impute_rag(&[(ViewId(0), &q0), (ViewId(2), &q2)], ViewId(1), &db, None).unwrap();
        let b = impute_rag(&[(ViewId(0), &s0), (ViewId(2), &s2)], ViewId(1), &scaled, None).unwrap();
        assert_eq!(a.index, b.index);
        let avail = [ViewId(0), ViewId(2)];
        let fa = fit_covariance(&db, &avail, ViewId(1)).unwrap();
        let fb = fit_covariance(&scaled, &avail, ViewId(1)).unwrap();
        let a = impute_covariance(&[(ViewId(0), &q0), (ViewId(2), &q2)], &fa, &db, None).unwrap();
        let b = impute_covariance(&[(ViewId(0), &s0), (ViewId(2), &s2)], &fb, &scaled, None).unwrap();
        assert_eq!(a.index, b.index);
    }
}

#[test]
fn centered_variant_scores_with_pseudo_inverse() {
    let mut r = rng(7);
    let db = random_db(&mut r, 30, 2, 3);
    let fit = fit_covariance(&db, &[ViewId(0)], ViewId(1)).unwrap().with_centered(true);
    // With n > c the covariance is invertible; check Σ·Σ⁺ ≈ I via the score
    // of a delta against itself equalling the squared Mahalanobis length.
    let q = random_row(&mut r, 3);
    let s = fit.score(q.data(), 0);
    let d: Vec<f64> = db.entries[0].features[0].data().iter().zip(fit.mu.data()).map(|(a, b)| a - b).collect();
    let qc: Vec<f64> = q.data().iter().zip(fit.mu.data()).map(|(a, b)| a - b).collect();
    // Solve Σ x = d by Gaussian elimination as an independent inverse.
    let n = 3;
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| fit.sigma.row_slice(i).to_vec()).collect();
    let mut x = d.clone();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        x.swap(col, p);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in 0..n {
                    a[row][k] -= f * a[col][k];
                }
                x[row] -= f * x[col];
            }
        }
    }
    let solved: Vec<f64> = (0..n).map(|i| x[i] / a[i][i]).collect();
    let expect: f64 = qc.iter().zip(&solved).map(|(a, b)| a * b).sum();
    assert!((s - expect).abs() < 1e-8 * expect.abs().max(1.0), "{s} vs {expect}");
}

#[test]
fn constant_and_learnable_outputs() {
    assert_eq!(impute_constant(4).data(), &[0.0; 4]);
    assert_eq!(impute_constant(1).data(), &[0.0]);
    let v = impute_learnable(&Tensor::row(&[3.0, 4.0])).unwrap();
    assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
    let v = impute_learnable(&Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
    let h = 1.0 / 2f64.sqrt();
    assert!((v.data()[0] - h).abs() < 1e-15 && (v.data()[1] - h).abs() < 1e-15);
    assert!(matches!(impute_learnable(&Tensor::zeros(&[4, 3])), Err(Error::Singular(_))));
}

#[test]
fn learnable_output_has_unit_norm_after_every_training_step() {
    let (train, _) = interaction_benchmark(3);
    let small = train.with_cases(train.cases[..20].to_vec());
    let mut config = TrainConfig::new(
        Architecture::Giim { hidden: vec![8, 8, 8, 8, 8] },
        ImputerKind::Learnable,
        ViewId(1),
        1,
    );
    config.epochs = 3;
    config.eta = 0.5;
    config.adam.learning_rate = 0.05;
    let mut steps = 0;
    let mut first: Option<Tensor> = None;
    let mut last: Option<Tensor> = None;
    train_observed(&small, &config, |imp| {
        let v = imp.learnable_vector().unwrap();
        assert!((v.frobenius_norm() - 1.0).abs() < 1e-9);
        first.get_or_insert_with(|| imp.learnable_param().unwrap().clone());
        last = Some(imp.learnable_param().unwrap().clone());
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, 60);
    assert_ne!(first, last, "the learnable parameter receives updates");
}

#[test]
fn fitted_imputers_return_database_vectors() {
    let (train, _) = interaction_benchmark(4);
    for kind in [ImputerKind::Rag, ImputerKind::Covariance] {
        let imp = Imputer::fit(kind, &train.cases, Task::Lesion, 3, 16, ViewId(1), 0).unwrap();
        let db = imp.db.as_ref().unwrap();
        assert_eq!(db.len(), train.lesion_count());
        let mut masked = train.cases[0].clone();
        masked.mask_view(ViewId(1));
        for (_, t) in imp.impute_lesions(&masked, Some(&masked.patient_id)).unwrap() {
            assert!(contains_verbatim(db, ViewId(1), &t));
            let own = db.entries.iter().filter(|e| e.patient_id == masked.patient_id);
            assert!(own.into_iter().all(|e| e.features[1] != t), "own patient excluded");
        }
    }
}

#[test]
fn exam_database_holds_view_means_of_complete_exams() {
    let mut r = rng(8);
    let mut a = random_case(&mut r, 2, 2, 3, 2, &[]);
    a.patient_id = "a".into();
    a.exam_label = Some(1);
    let mut b = random_case(&mut r, 2, 2, 3, 2, &[(0, 1), (1, 1)]);
    b.patient_id = "b".into();
    b.exam_label = Some(0);
    let db = FeatureDatabase::from_cases(&[a.clone(), b], Task::Exam).unwrap();
    assert_eq!(db.len(), 1);
    for v in 0..2 {
        let (x, y) = (a.lesions[0].features[v].as_ref().unwrap(), a.lesions[1].features[v].as_ref().unwrap());
        for j in 0..3 {
            assert!((db.entries[0].features[v].data()[j] - 0.5 * (x.data()[j] + y.data()[j])).abs() < 1e-15);
        }
    }
}

#[test]
fn imputer_kinds_parse_and_print() {
    for k in ImputerKind::ALL {
        assert_eq!(k.to_string().parse::<ImputerKind>().unwrap(), k);
    }
    assert!("mean".parse::<ImputerKind>().is_err());
}
