use std::process::ExitCode;

fn main() -> ExitCode {
    specalloc::cli::run(std::env::args_os())
}
