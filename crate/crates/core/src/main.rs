fn main() {
    std::process::exit(gloss_wsd::cli::run(std::env::args_os()));
}
