int first(void) {
  char a[10];
  nt_arr<char> p = a;
  return p[0];
}
