fn main() {
    std::process::exit(sam3unet::cli::run(std::env::args_os()));
}
