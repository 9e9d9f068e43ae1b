#include <iostream>

int main() {
  std::cout << "fgr: placeholder\n";
  return 0;
}
