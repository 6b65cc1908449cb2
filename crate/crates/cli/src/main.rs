use std::process::ExitCode;

fn main() -> ExitCode {
    tensorfuse_cli::main_impl()
}
