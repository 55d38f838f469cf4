use std::process::ExitCode;

fn main() -> ExitCode {
    ctlmap_server::cli::main_with(std::env::args_os())
}
