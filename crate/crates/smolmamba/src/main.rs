use std::process::ExitCode;

fn main() -> ExitCode {
    smolmamba::cli::run(std::env::args().skip(1))
}
