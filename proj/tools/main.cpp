#include <cstdio>
int main() { std::puts("lcdforge: placeholder"); return 0; }
