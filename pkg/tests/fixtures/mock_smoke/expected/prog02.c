void grow(int n) {
  arr<int> q : count(n + 1);
  q = malloc(sizeof(int) * (n + 1));
  q[n] = 0;
}
