//! Pretrains the face classifier F and the independently seeded held-out
//! verifier on a dataset's train split, saving both checkpoints.
//!
//! Usage: pretrain_recognizer [data_dir] [out_dir]

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = std::path::PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/data"));
    let out = std::path::PathBuf::from(args.get(2).map(String::as_str).unwrap_or("runs/pretrain"));
    if let Err(e) = facepass::cli::run_pretrain(&data, &out, None, &[], None) {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
