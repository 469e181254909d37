void axpy(int* x, int* y, int m) {
  int i;
  for (i = 0; i < m; i++) {
    y[i] = y[i] + x[i];
  }
}
