fn main() {
    std::process::exit(mdsampler::cli::run(std::env::args_os()));
}
