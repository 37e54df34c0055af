//! Dataset layouts, the synthetic corpus, preprocessing, and batch sampling.

use dgnet::config::Layout;
use dgnet::data::toy::{generate, ToySpec};
use dgnet::data::{grayscale, hflip, replicate3, Dataset, PairSampler, Preprocess, LUMA};
use ndarray::Array4;
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn touch_png(path: &Path) {
    // A real 2x2 image so decoders accept it where a test loads pixels.
    let img = image::RgbImage::from_fn(2, 2, |x, y| image::Rgb([x as u8 * 90, y as u8 * 90, 40]));
    img.save(path).unwrap();
}

// ---- market layout ----

#[test]
fn market_names_carry_identity_and_camera() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["0001_c1s1_001051_00.png", "0001_c2s1_002300_00.png", "0007_c3s2_000100_00.png"] {
        touch_png(&dir.path().join(name));
    }
    let ds = Dataset::load(dir.path(), Layout::Market).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.classes, vec![1, 7]);
    assert_eq!(ds.items[0].pid, 1);
    assert_eq!(ds.items[0].cam, 1);
    assert_eq!(ds.items[1].cam, 2);
    assert_eq!(ds.items[2].pid, 7);
    assert_eq!(ds.items[2].cam, 3);
}

#[test]
fn market_junk_keeps_negative_id_but_no_class() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(&dir.path().join("-1_c1s1_000000_00.png"));
    touch_png(&dir.path().join("0042_c1s1_000000_00.png"));
    let ds = Dataset::load(dir.path(), Layout::Market).unwrap();
    assert_eq!(ds.len(), 2, "junk stays in the item list");
    assert_eq!(ds.classes, vec![42], "junk contributes no class");
    let junk = ds.items.iter().find(|it| it.pid == -1).unwrap();
    assert_eq!(ds.label(junk), None);
}

#[test]
fn market_unparseable_names_are_skipped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(&dir.path().join("0005_c1s1_0_0.png"));
    touch_png(&dir.path().join("readme_notes.png"));
    touch_png(&dir.path().join("Thumbs.db.png"));
    let ds = Dataset::load(dir.path(), Layout::Market).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.items[0].pid, 5);
}

#[test]
fn market_split_dirs_follow_the_convention() {
    let root = Path::new("/data/market");
    let d = |s| Dataset::split_dir(root, Layout::Market, s).unwrap();
    assert_eq!(d("train"), root.join("bounding_box_train"));
    assert_eq!(d("query"), root.join("query"));
    assert_eq!(d("gallery"), root.join("bounding_box_test"));
    assert!(Dataset::split_dir(root, Layout::Market, "val").is_err());
}

// ---- folder-per-id layout ----

#[test]
fn folder_layout_reads_identity_from_directory_and_camera_from_stem() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("003")).unwrap();
    fs::create_dir(dir.path().join("010")).unwrap();
    touch_png(&dir.path().join("003/000_c0.png"));
    touch_png(&dir.path().join("003/001_c1.png"));
    touch_png(&dir.path().join("010/shot.png"));
    let ds = Dataset::load(dir.path(), Layout::FolderPerId).unwrap();
    assert_eq!(ds.classes, vec![3, 10]);
    let by_name: BTreeMap<String, (i64, u32)> = ds
        .items
        .iter()
        .map(|it| {
            (
                it.path.file_name().unwrap().to_string_lossy().into_owned(),
                (it.pid, it.cam),
            )
        })
        .collect();
    assert_eq!(by_name["000_c0.png"], (3, 0));
    assert_eq!(by_name["001_c1.png"], (3, 1));
    assert_eq!(by_name["shot.png"], (10, 0), "missing camera token defaults to 0");
}

#[test]
fn folder_layout_rejects_non_numeric_identity_folders() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("alice")).unwrap();
    touch_png(&dir.path().join("alice/000_c0.png"));
    let err = Dataset::load(dir.path(), Layout::FolderPerId).unwrap_err();
    assert!(err.to_string().contains("alice"), "got: {err}");
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(dir.path(), Layout::FolderPerId).unwrap_err();
    assert!(err.to_string().contains("no images found"), "got: {err}");
}

// ---- manifest layout ----

#[test]
fn manifest_rows_resolve_relative_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("imgs")).unwrap();
    touch_png(&dir.path().join("imgs/a.png"));
    touch_png(&dir.path().join("imgs/b.png"));
    let manifest = dir.path().join("list.tsv");
    fs::write(
        &manifest,
        "# comment line\nimgs/a.png\t4\t0\n\nimgs/b.png\t4\t1\n",
    )
    .unwrap();
    let ds = Dataset::load(&manifest, Layout::Manifest).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.classes, vec![4]);
    assert!(ds.items[0].path.starts_with(dir.path()));
    assert_eq!(ds.items[1].cam, 1);
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.tsv");
    fs::write(&manifest, "a.png\t1\t0\nb.png only\n").unwrap();
    let err = Dataset::load(&manifest, Layout::Manifest).unwrap_err();
    assert!(err.to_string().contains("line 2"), "got: {err}");

    fs::write(&manifest, "a.png\tseven\t0\n").unwrap();
    let err = Dataset::load(&manifest, Layout::Manifest).unwrap_err();
    assert!(err.to_string().contains("seven"), "got: {err}");
}

#[test]
fn items_enumerate_in_path_order() {
    let dir = tempfile::tempdir().unwrap();
    // Created out of order on purpose.
    for name in ["0009_c1s1_0_0.png", "0001_c1s1_0_0.png", "0005_c1s1_0_0.png"] {
        touch_png(&dir.path().join(name));
    }
    let ds = Dataset::load(dir.path(), Layout::Market).unwrap();
    let pids: Vec<i64> = ds.items.iter().map(|it| it.pid).collect();
    assert_eq!(pids, vec![1, 5, 9]);
}

// ---- toy corpus ----

#[test]
fn toy_counts_and_split_structure() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec::new(4, 8, 64, 32, 0);
    let s = generate(dir.path(), &spec, false).unwrap();
    assert_eq!((s.ids, s.train_images, s.query_images, s.gallery_images), (4, 32, 8, 32));

    let count = |split: &str| {
        let mut files = 0usize;
        let mut folders = 0usize;
        for e in fs::read_dir(dir.path().join(split)).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                folders += 1;
                files += fs::read_dir(&p).unwrap().count();
            }
        }
        (folders, files)
    };
    assert_eq!(count("train"), (4, 32), "4 identity folders, 32 images");
    assert_eq!(count("query"), (4, 8));
    assert_eq!(count("gallery"), (4, 32));
}

#[test]
fn toy_generation_is_byte_deterministic() {
    let spec = ToySpec::new(3, 4, 32, 16, 123);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(a.path(), &spec, false).unwrap();
    generate(b.path(), &spec, false).unwrap();

    let mut walked = 0;
    for split in ["train", "query", "gallery"] {
        for id_dir in fs::read_dir(a.path().join(split)).unwrap() {
            let id_dir = id_dir.unwrap();
            for f in fs::read_dir(id_dir.path()).unwrap() {
                let f = f.unwrap();
                let rel = Path::new(split)
                    .join(id_dir.file_name())
                    .join(f.file_name());
                let x = fs::read(f.path()).unwrap();
                let y = fs::read(b.path().join(&rel)).unwrap();
                assert_eq!(x, y, "{} differs between identically seeded runs", rel.display());
                walked += 1;
            }
        }
    }
    assert_eq!(walked, 12 + 6 + 12);

    let c = tempfile::tempdir().unwrap();
    let other = ToySpec::new(3, 4, 32, 16, 124);
    generate(c.path(), &other, false).unwrap();
    let pick = "train/000/000_c0.png";
    assert_ne!(
        fs::read(a.path().join(pick)).unwrap(),
        fs::read(c.path().join(pick)).unwrap(),
        "a different seed changes the pixels"
    );
}

#[test]
fn toy_camera_assignment_follows_the_split_rules() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &ToySpec::new(2, 4, 32, 16, 5), false).unwrap();
    let cams = |split: &str| {
        let root = Dataset::split_dir(dir.path(), Layout::FolderPerId, split).unwrap();
        let ds = Dataset::load(&root, Layout::FolderPerId).unwrap();
        ds.items.iter().map(|it| it.cam).collect::<Vec<u32>>()
    };
    // Train alternates cameras per index within each identity.
    assert_eq!(cams("train"), vec![0, 1, 0, 1, 0, 1, 0, 1]);
    // Queries are all camera 0 so every query has a cross-camera match.
    assert!(cams("query").iter().all(|&c| c == 0));
    // Gallery starts at camera 1 so each query's first match is cross-camera.
    assert_eq!(cams("gallery"), vec![1, 0, 1, 0, 1, 0, 1, 0]);
}

#[test]
fn toy_single_identity_is_valid_but_pairing_refuses_it() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &ToySpec::new(1, 4, 32, 16, 0), false).unwrap();
    let ds = Dataset::load(&dir.path().join("train"), Layout::FolderPerId).unwrap();
    assert_eq!(ds.num_classes(), 1);
    let err = match PairSampler::new(&ds, 2, 2) {
        Err(e) => e,
        Ok(_) => panic!("one identity must not satisfy a cross-identity sampler"),
    };
    assert!(
        err.to_string().contains("need at least 2 identities"),
        "cross-identity refusal names the requirement: {err}"
    );
}

#[test]
fn toy_rejects_degenerate_specs_and_nonempty_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), &ToySpec::new(0, 4, 32, 16, 0), false).is_err());
    assert!(generate(dir.path(), &ToySpec::new(2, 1, 32, 16, 0), false).is_err());

    generate(dir.path(), &ToySpec::new(2, 2, 32, 16, 0), false).unwrap();
    let err = generate(dir.path(), &ToySpec::new(2, 2, 32, 16, 0), false).unwrap_err();
    assert!(err.to_string().contains("--force"), "refusal mentions the override: {err}");
    generate(dir.path(), &ToySpec::new(2, 2, 32, 16, 0), true).unwrap();
}

// ---- preprocessing ----

fn pre(h: usize, w: usize) -> Preprocess {
    Preprocess { height: h, width: w, mean: [0.0; 3], std: [1.0; 3] }
}

#[test]
fn tensorize_scales_to_unit_range_in_channel_major_order() {
    let img = image::RgbImage::from_fn(2, 2, |x, y| {
        image::Rgb([(x * 255) as u8, (y * 255) as u8, 51])
    });
    let t = pre(2, 2).tensorize(&img);
    assert_eq!(t.dim(), (3, 2, 2));
    assert_eq!(t[(0, 0, 0)], 0.0);
    assert_eq!(t[(0, 0, 1)], 1.0, "red follows x");
    assert_eq!(t[(1, 1, 0)], 1.0, "green follows y");
    assert!((t[(2, 0, 0)] - 0.2).abs() < 1e-12, "51/255 = 0.2");
}

#[test]
fn normalization_shifts_and_scales_per_channel() {
    let img = image::RgbImage::from_pixel(1, 1, image::Rgb([255, 128, 0]));
    let p = Preprocess { height: 1, width: 1, mean: [0.5, 0.5, 0.5], std: [0.5, 0.25, 1.0] };
    let t = p.tensorize(&img);
    assert!((t[(0, 0, 0)] - 1.0).abs() < 1e-12);
    assert!((t[(1, 0, 0)] - (128.0 / 255.0 - 0.5) / 0.25).abs() < 1e-12);
    assert!((t[(2, 0, 0)] - (-0.5)).abs() < 1e-12);
}

#[test]
fn resize_hits_the_configured_geometry_deterministically() {
    let img = image::RgbImage::from_fn(7, 13, |x, y| {
        image::Rgb([(x * 17 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8])
    });
    let p = pre(8, 4);
    let a = p.tensorize(&img);
    let b = p.tensorize(&img);
    assert_eq!(a.dim(), (3, 8, 4));
    assert_eq!(a, b);
}

#[test]
fn batch_stacks_items_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec::new(2, 2, 16, 8, 9);
    generate(dir.path(), &spec, false).unwrap();
    let ds = Dataset::load(&dir.path().join("train"), Layout::FolderPerId).unwrap();
    let p = pre(16, 8);
    let items: Vec<&dgnet::data::Item> = ds.items.iter().collect();
    let b = p.batch(&items).unwrap();
    assert_eq!(b.dim(), (4, 3, 16, 8));
    let first = p.load(&ds.items[0].path).unwrap();
    assert_eq!(b.index_axis(ndarray::Axis(0), 0).to_owned(), first);
}

#[test]
fn grayscale_applies_the_shared_luminance_weights() {
    let mut x = Array4::<f64>::zeros((1, 3, 2, 2));
    x[(0, 0, 0, 0)] = 1.0;
    x[(0, 1, 0, 1)] = 1.0;
    x[(0, 2, 1, 0)] = 1.0;
    let g = grayscale(&x);
    assert_eq!(g.dim(), (1, 1, 2, 2));
    assert_eq!(g[(0, 0, 0, 0)], LUMA[0]);
    assert_eq!(g[(0, 0, 0, 1)], LUMA[1]);
    assert_eq!(g[(0, 0, 1, 0)], LUMA[2]);
    assert_eq!(g[(0, 0, 1, 1)], 0.0);
}

#[test]
fn hflip_is_an_involution_and_replicate3_copies_the_plane() {
    let mut rng = StdRng::seed_from_u64(3);
    let x = Array4::from_shape_simple_fn((2, 3, 4, 5), || rand::Rng::gen::<f64>(&mut rng));
    let flipped = hflip(&x);
    assert_ne!(flipped, x);
    assert_eq!(hflip(&flipped), x);
    assert_eq!(flipped[(0, 0, 0, 0)], x[(0, 0, 0, 4)]);

    let g = grayscale(&x);
    let r = replicate3(&g);
    assert_eq!(r.dim(), (2, 3, 4, 5));
    for c in 0..3 {
        assert_eq!(
            r.index_axis(ndarray::Axis(1), c),
            g.index_axis(ndarray::Axis(1), 0)
        );
    }
}

// ---- batch sampling ----

#[test]
fn sampler_builds_identity_balanced_cross_paired_batches() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &ToySpec::new(4, 4, 32, 16, 1), false).unwrap();
    let ds = Dataset::load(&dir.path().join("train"), Layout::FolderPerId).unwrap();
    let sampler = PairSampler::new(&ds, 2, 2).unwrap();
    let mut rng = StdRng::seed_from_u64(7);

    for _ in 0..50 {
        let plan = sampler.sample(&mut rng);
        assert_eq!(plan.i.len(), 4);
        assert_eq!(plan.t.len(), 4);
        assert_eq!(plan.j.len(), 4);

        for k in 0..4 {
            // Anchor and its same-identity partner share a label.
            assert_eq!(ds.items[plan.i[k]].pid, ds.items[plan.t[k]].pid);
            // The cross partner is a different identity, labels match items.
            assert_ne!(plan.y_i[k], plan.y_j[k]);
            assert_eq!(ds.label(&ds.items[plan.i[k]]).unwrap(), plan.y_i[k]);
            assert_eq!(ds.label(&ds.items[plan.j[k]]).unwrap(), plan.y_j[k]);
        }
        // Identity-balanced: exactly ids distinct classes, insts each.
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for &y in &plan.y_i {
            *per.entry(y).or_default() += 1;
        }
        assert_eq!(per.len(), 2);
        assert!(per.values().all(|&n| n == 2));
    }
}

#[test]
fn sampler_sees_every_identity_over_time() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &ToySpec::new(4, 2, 32, 16, 2), false).unwrap();
    let ds = Dataset::load(&dir.path().join("train"), Layout::FolderPerId).unwrap();
    let sampler = PairSampler::new(&ds, 2, 1).unwrap();
    let mut rng = StdRng::seed_from_u64(11);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..100 {
        for y in sampler.sample(&mut rng).y_i {
            seen.insert(y);
        }
    }
    assert_eq!(seen.len(), 4, "shuffled class choice covers all identities");
}

#[test]
fn sampler_ignores_junk_items() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["0001_c1s1_0_0.png", "0001_c2s1_0_0.png", "0002_c1s1_0_0.png", "0002_c2s1_0_0.png", "-1_c1s1_0_0.png"] {
        touch_png(&dir.path().join(name));
    }
    let ds = Dataset::load(dir.path(), Layout::Market).unwrap();
    let sampler = PairSampler::new(&ds, 2, 2).unwrap();
    let mut rng = StdRng::seed_from_u64(0);
    for _ in 0..20 {
        let plan = sampler.sample(&mut rng);
        for &ix in plan.i.iter().chain(plan.t.iter()).chain(plan.j.iter()) {
            assert!(ds.items[ix].pid >= 0, "junk never enters a batch");
        }
    }
}
