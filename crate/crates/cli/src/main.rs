fn main() -> std::process::ExitCode {
    tlpsim::cli::main()
}
