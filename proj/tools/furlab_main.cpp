#include <iostream>

int main() {
  std::cout << "furlab: CLI wiring pending\n";
  return 0;
}
