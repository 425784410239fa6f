fn main() {
    println!("vemd");
}
