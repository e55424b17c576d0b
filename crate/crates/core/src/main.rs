fn main() -> std::process::ExitCode {
    hiap::cli::run()
}
