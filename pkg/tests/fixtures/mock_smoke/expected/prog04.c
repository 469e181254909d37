int slen(nt_arr<char> s : count(0)) {
  int n = 0;
  while (*s != '\0') {
    s++;
    n++;
  }
  return n;
}
