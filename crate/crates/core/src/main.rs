fn main() -> std::process::ExitCode {
    docdial::cli::main()
}
