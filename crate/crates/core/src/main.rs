fn main() -> std::process::ExitCode {
    colnode::cli::main_with_args(std::env::args_os())
}
