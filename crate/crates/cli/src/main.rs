use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(oid_cli::run(std::env::args().skip(1).collect()))
}
