fn main() {
    std::process::exit(fosynth::cli::run(std::env::args_os()));
}
