fn main() {
    std::process::exit(vfm_guide::cli::run(std::env::args_os()));
}
