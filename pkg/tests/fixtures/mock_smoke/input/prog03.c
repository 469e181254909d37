void fill(int* p, int e) {
  int i;
  for (i = 0; i < e; i++) {
    p[i] = 0;
  }
}
