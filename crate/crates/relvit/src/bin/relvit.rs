use std::process::ExitCode;

fn main() -> ExitCode {
    relvit::cli::main()
}
