fn main() -> std::process::ExitCode {
    ctxsep::cli::main_with_args(std::env::args_os())
}
