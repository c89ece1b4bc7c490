use std::process::ExitCode;

fn main() -> ExitCode {
    facepass::cli::main()
}
