fn main() -> std::process::ExitCode {
    erpo::cli::main()
}
