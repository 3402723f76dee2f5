fn main() -> std::process::ExitCode {
    pseudomodal::cli::main_with_args(std::env::args_os())
}
