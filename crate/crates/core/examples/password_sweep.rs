//! Exhaustive password sweep for a small-N model: renders all 2^N
//! anonymizations of one face as a mosaic (tile row-major index = password
//! integer value) plus pairwise embedding statistics.
//!
//! Needs a model trained with password_bits <= 8, e.g.
//! `facepass train --set password_bits=8 ...`.
//!
//! Usage: password_sweep [model8.ckpt] [verifier.ckpt] [image.png] [out_dir] [data_dir]

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = std::path::PathBuf::from(
        args.get(1).map(String::as_str).unwrap_or("runs/train8/model.ckpt"),
    );
    let verifier = std::path::PathBuf::from(
        args.get(2).map(String::as_str).unwrap_or("runs/pretrain/verifier.ckpt"),
    );
    let image = std::path::PathBuf::from(
        args.get(3).map(String::as_str).unwrap_or("runs/data/id000/img000.png"),
    );
    let out = std::path::PathBuf::from(args.get(4).map(String::as_str).unwrap_or("runs/sweep"));
    let calibrate = args.get(5).map(std::path::PathBuf::from);
    if let Err(e) = facepass::cli::run_sweep(
        &model,
        &image,
        &out,
        &verifier,
        calibrate.as_deref(),
        None,
        0,
    ) {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
