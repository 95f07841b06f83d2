fn main() {
    std::process::exit(seeder::cli::run());
}
