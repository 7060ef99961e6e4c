#include <iostream>

int main() {
  std::cout << "attnmi: placeholder\n";
  return 0;
}
