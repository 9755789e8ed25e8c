use std::process::ExitCode;

fn main() -> ExitCode {
    igpo_forge::cli::dispatch(std::env::args_os())
}
