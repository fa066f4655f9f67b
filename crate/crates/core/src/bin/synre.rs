fn main() {
    std::process::exit(synre::cli::run(std::env::args_os()));
}
