use std::path::Path;

use csattn_core::data::{read_png, write_png, PairDataset};
use csattn_core::{Error, Tensor};
use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn save_rgb8(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| Rgb(f(x, y)))
        .save(path)
        .unwrap();
}

#[test]
fn eight_bit_values_map_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    save_rgb8(&path, 3, 2, |x, _| if x == 0 { [0, 255, 51] } else { [255, 0, 102] });
    let t = read_png(&path).unwrap();
    assert_eq!(t.shape(), &[1, 3, 2, 3]);
    let at = |c: usize, y: usize, x: usize| t.data()[(c * 2 + y) * 3 + x];
    assert_eq!((at(0, 0, 0), at(1, 0, 0)), (0.0, 1.0));
    assert_eq!((at(0, 1, 2), at(1, 1, 2)), (1.0, 0.0));
    assert_eq!(at(2, 0, 0), 0.2);
}

#[test]
fn sixteen_bit_values_map_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.png");
    ImageBuffer::<Rgb<u16>, _>::from_fn(2, 1, |x, _| {
        if x == 0 {
            Rgb([0, 65535, 32768])
        } else {
            Rgb([65535, 0, 0])
        }
    })
    .save(&path)
    .unwrap();
    let t = read_png(&path).unwrap();
    let d = t.data();
    // planes: r = [0, 1], g = [1, 0], b = [0.5.., 0]
    assert_eq!(&d[..4], &[0.0, 1.0, 1.0, 0.0]);
    assert!((d[4] - 32768.0 / 65535.0).abs() < 1e-6);
}

#[test]
fn write_then_read_is_exact_on_the_8_bit_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.png");
    let img = Tensor::from_fn(vec![1, 3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
    write_png(&path, &img).unwrap();
    let back = read_png(&path).unwrap();
    assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn empty_directory_is_an_error() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match PairDataset::load(a.path(), b.path()) {
        Err(Error::Dataset(msg)) => assert!(msg.contains("no PNG"), "{msg}"),
        other => panic!("expected dataset error, got {other:?}"),
    }
}

#[test]
fn unmatched_names_are_reported() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_rgb8(&a.path().join("x.png"), 4, 4, |_, _| [1, 2, 3]);
    save_rgb8(&b.path().join("x.png"), 4, 4, |_, _| [1, 2, 3]);
    save_rgb8(&a.path().join("y.png"), 4, 4, |_, _| [1, 2, 3]);
    match PairDataset::load(a.path(), b.path()) {
        Err(Error::Dataset(msg)) => assert!(msg.contains("y.png"), "{msg}"),
        other => panic!("expected dataset error, got {other:?}"),
    }
}

#[test]
fn undecodable_file_is_an_error() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    std::fs::write(a.path().join("z.png"), b"not a png").unwrap();
    std::fs::write(b.path().join("z.png"), b"not a png").unwrap();
    assert!(matches!(
        PairDataset::load(a.path(), b.path()),
        Err(Error::Image { .. })
    ));
}

#[test]
fn folder_pairs_crop_deterministically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (i, name) in ["p0.png", "p1.png"].iter().enumerate() {
        save_rgb8(&a.path().join(name), 20, 18, |x, y| {
            [(x * 12) as u8, (y * 13) as u8, i as u8 * 90]
        });
        save_rgb8(&b.path().join(name), 20, 18, |x, y| {
            [(x * 11) as u8, (y * 12) as u8, i as u8 * 80]
        });
    }
    let data = PairDataset::load(a.path(), b.path()).unwrap();
    assert_eq!(data.names, ["p0.png", "p1.png"]);

    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        data.batch(&[0, 1, 1], 16, true, &mut rng).unwrap()
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
    assert_eq!(draw(7).0.shape(), &[3, 3, 16, 16]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(data.sample(0, 32, false, &mut rng), Err(Error::Dataset(_))));
}
