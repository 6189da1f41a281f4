namespace agrikd {}
