fn main() {
    let code = sterf::cli::run(std::env::args_os(), &mut |line| println!("{line}"));
    std::process::exit(code);
}
