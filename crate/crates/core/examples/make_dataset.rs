//! Generates the synthetic identity corpus used by the other examples:
//! `<out>/<identity>/<image>.png` plus train/val/test split manifests.
//!
//! Usage: make_dataset [out_dir] [n_identities] [images_per_id] [size] [seed]

use facepass::dataset::{generate_synthetic_dataset, SynthSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = std::path::PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/data"));
    let spec = SynthSpec {
        n_identities: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20),
        images_per_identity: args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12),
        image_size: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64),
        seed: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0),
    };
    let splits = generate_synthetic_dataset(&out, &spec).expect("dataset generation failed");
    println!(
        "wrote {} identities x {} images at {}px under {}",
        spec.n_identities,
        spec.images_per_identity,
        spec.image_size,
        out.display()
    );
    println!(
        "splits: {} train / {} val / {} test identities",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
}
